//! Closed-loop simulation of the observer-based protocols over sampled
//! Markov switching paths, plus consensus, attenuation and transient
//! metrics.

mod disturbance;
mod export;
mod integrate;
mod metrics;

use nalgebra::DVector;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::graphs::TopologyEnsemble;
use crate::markov::{sample_path_with, sample_state, MarkovError, MarkovGenerator, SwitchingPath};
use crate::synthesis::{FullOrderProtocol, Plant, ReducedOrderProtocol};

pub use disturbance::DisturbanceSpec;
pub use export::{csv_header, write_csv};
pub use metrics::{
    consensus_signals, jtr_ratio, oscillation_count, overshoot, rms_disagreement, signal_metrics,
    transient_metrics,
    ConsensusSignals, PerformanceReport, TransientMetrics, SETTLING_BAND,
};

use integrate::{integrate, FullOrderLoop, ReducedOrderLoop};

/// Any agent state (or observer state) with a larger Euclidean norm
/// aborts the run.
pub const BLOWUP_NORM: f64 = 1e12;
pub const DEFAULT_DT: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("state norm exceeded {BLOWUP_NORM:e} at t = {time}")]
    NumericalBlowup { time: f64 },
    #[error("performance ratio undefined: zero disturbance and zero initial disagreement")]
    ZeroDenominator,
    #[error("signal still outside the settling band at t_end (deviation {deviation:e}, band {band:e})")]
    Unsettled { deviation: f64, band: f64 },
    #[error("trajectories do not share one scenario: {0}")]
    ScenarioMismatch(String),
    #[error(transparent)]
    Markov(#[from] MarkovError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProtocolKind {
    Full,
    Reduced,
}

impl ProtocolKind {
    pub fn observer_label(self) -> &'static str {
        match self {
            Self::Full => "xhat",
            Self::Reduced => "v",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimSettings {
    pub t_end: f64,
    pub dt: f64,
    /// Keep every `record_stride`-th grid point.
    pub record_stride: usize,
    /// Feed `T D w_i` into the reduced observer.
    pub observer_disturbance_feed: bool,
}

impl SimSettings {
    pub fn new(t_end: f64, dt: f64) -> Self {
        Self {
            t_end,
            dt,
            record_stride: 1,
            observer_disturbance_feed: true,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.record_stride = stride;
        self
    }

    /// Number of integration steps; `t_end` must be a multiple of `dt`
    /// and of the recording interval.
    pub fn n_steps(&self) -> Result<usize, SimError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(SimError::InvalidParameter(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return Err(SimError::InvalidParameter(format!(
                "t_end must be positive, got {}",
                self.t_end
            )));
        }
        if self.record_stride == 0 {
            return Err(SimError::InvalidParameter("record stride must be at least 1".into()));
        }
        let steps = (self.t_end / self.dt).round();
        if (steps * self.dt - self.t_end).abs() > 1e-9 * self.t_end {
            return Err(SimError::InvalidParameter(format!(
                "t_end = {} is not a multiple of dt = {}",
                self.t_end, self.dt
            )));
        }
        let steps = steps as usize;
        if steps % self.record_stride != 0 {
            return Err(SimError::InvalidParameter(format!(
                "{steps} steps are not a multiple of the record stride {}",
                self.record_stride
            )));
        }
        Ok(steps)
    }
}

/// Sampled closed-loop run. All series share the grid `times`; vectors
/// are agent-major (`x[i * n + k]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub kind: ProtocolKind,
    pub n_agents: usize,
    pub n: usize,
    pub observer_dim: usize,
    pub m: usize,
    pub l: usize,
    /// Grid spacing of the recorded series.
    pub dt: f64,
    pub times: Vec<f64>,
    pub sigma: Vec<usize>,
    pub states: Vec<DVector<f64>>,
    pub observer_states: Vec<DVector<f64>>,
    /// `xhat_i` for the full-order observer, `Q1 y_i + Q2 v_i` for the
    /// reduced one.
    pub estimates: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    pub disturbance: Vec<DVector<f64>>,
    pub path: SwitchingPath,
}

impl Trajectory {
    fn with_capacity(
        kind: ProtocolKind,
        [n_agents, n, observer_dim, m, l]: [usize; 5],
        dt: f64,
        path: SwitchingPath,
        cap: usize,
    ) -> Self {
        Self {
            kind,
            n_agents,
            n,
            observer_dim,
            m,
            l,
            dt,
            times: Vec::with_capacity(cap),
            sigma: Vec::with_capacity(cap),
            states: Vec::with_capacity(cap),
            observer_states: Vec::with_capacity(cap),
            estimates: Vec::with_capacity(cap),
            controls: Vec::with_capacity(cap),
            disturbance: Vec::with_capacity(cap),
            path,
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn t_end(&self) -> f64 {
        *self.times.last().unwrap_or(&0.0)
    }

    /// Scalar series `x_agent[channel](t)`.
    pub fn state_channel(&self, agent: usize, channel: usize) -> Vec<f64> {
        self.states
            .iter()
            .map(|x| x[agent * self.n + channel])
            .collect()
    }
}

/// Draws `sigma(0)` from the stationary distribution and samples the
/// rest of the path from the same stream.
pub fn sample_switching(
    g: &MarkovGenerator,
    t_end: f64,
    seed: u64,
) -> Result<SwitchingPath, SimError> {
    let pi = g.stationary_distribution()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s0 = sample_state(&pi.pi, &mut rng);
    Ok(sample_path_with(g, s0, t_end, &mut rng)?)
}

/// Seed of path `index` in an ensemble keyed by `master`.
pub fn path_seed(master: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index);
    rng.next_u64()
}

/// Uniform `[-1, 1]^(n_agents * n)` vector.
pub fn random_initial_states(n_agents: usize, n: usize, seed: u64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DVector::from_fn(n_agents * n, |_, _| rng.random_range(-1.0..=1.0))
}

/// Runs `f(index, seed)` for every path concurrently and returns results
/// in path-index order. The first error by index wins.
pub fn monte_carlo<T, F>(n_paths: usize, master_seed: u64, f: F) -> Result<Vec<T>, SimError>
where
    T: Send,
    F: Fn(usize, u64) -> Result<T, SimError> + Sync,
{
    let results: Vec<Result<T, SimError>> = (0..n_paths)
        .into_par_iter()
        .map(|k| f(k, path_seed(master_seed, k as u64)))
        .collect();
    results.into_iter().collect()
}

fn check_common(
    p: &Plant,
    e: &TopologyEnsemble,
    n_modes: usize,
    x0: &DVector<f64>,
    obs0: &DVector<f64>,
    obs_dim: usize,
    dist: &DisturbanceSpec,
) -> Result<(), SimError> {
    let na = e.n_nodes();
    if x0.len() != na * p.n() {
        return Err(SimError::DimensionMismatch(format!(
            "x0 has {} entries, expected {}",
            x0.len(),
            na * p.n()
        )));
    }
    if obs0.len() != na * obs_dim {
        return Err(SimError::DimensionMismatch(format!(
            "observer initial state has {} entries, expected {}",
            obs0.len(),
            na * obs_dim
        )));
    }
    if e.len() != n_modes {
        return Err(SimError::DimensionMismatch(format!(
            "{} topologies but the switching signal has {n_modes} states",
            e.len()
        )));
    }
    if x0.iter().chain(obs0.iter()).any(|v| !v.is_finite()) {
        return Err(SimError::InvalidParameter("initial states must be finite".into()));
    }
    dist.validate(na, p.l())
}

fn check_path(path: &SwitchingPath, settings: &SimSettings, n_modes: usize) -> Result<(), SimError> {
    settings.n_steps()?;
    if path.states.iter().any(|&s| s >= n_modes) {
        return Err(SimError::DimensionMismatch(
            "switching path visits a state without a topology".into(),
        ));
    }
    Ok(())
}

fn stack(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).copied())
}

fn check_full_dims(p: &Plant, proto: &FullOrderProtocol) -> Result<(), SimError> {
    if proto.k_gain.shape() != (p.m(), p.n()) || proto.l_gain.shape() != (p.n(), p.q1()) {
        return Err(SimError::DimensionMismatch(
            "full-order gains do not match the plant".into(),
        ));
    }
    Ok(())
}

fn check_reduced_dims(p: &Plant, proto: &ReducedOrderProtocol) -> Result<(), SimError> {
    let nv = p.n() - p.q1();
    let ok = proto.f_bar.shape() == (nv, nv)
        && proto.g_gain.shape() == (nv, p.q1())
        && proto.t_map.shape() == (nv, p.n())
        && proto.q1_map.shape() == (p.n(), p.q1())
        && proto.q2_map.shape() == (p.n(), nv)
        && proto.k_gain.shape() == (p.m(), p.n());
    if !ok {
        return Err(SimError::DimensionMismatch(
            "reduced-order protocol matrices do not match the plant".into(),
        ));
    }
    Ok(())
}

/// Full-order closed loop on a given switching path.
#[allow(clippy::too_many_arguments)]
pub fn simulate_full_order_on_path(
    p: &Plant,
    proto: &FullOrderProtocol,
    e: &TopologyEnsemble,
    path: &SwitchingPath,
    x0: &DVector<f64>,
    xhat0: &DVector<f64>,
    dist: &DisturbanceSpec,
    settings: &SimSettings,
) -> Result<Trajectory, SimError> {
    check_full_dims(p, proto)?;
    check_common(p, e, e.len(), x0, xhat0, p.n(), dist)?;
    check_path(path, settings, e.len())?;
    let sys = FullOrderLoop::new(p, proto, e);
    integrate(&sys, stack(x0, xhat0), path, dist, settings)
}

/// Full-order closed loop on a switching path sampled from `seed`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_full_order(
    p: &Plant,
    proto: &FullOrderProtocol,
    e: &TopologyEnsemble,
    g: &MarkovGenerator,
    x0: &DVector<f64>,
    xhat0: &DVector<f64>,
    dist: &DisturbanceSpec,
    settings: &SimSettings,
    seed: u64,
) -> Result<Trajectory, SimError> {
    check_full_dims(p, proto)?;
    check_common(p, e, g.n_states(), x0, xhat0, p.n(), dist)?;
    settings.n_steps()?;
    let path = sample_switching(g, settings.t_end, seed)?;
    simulate_full_order_on_path(p, proto, e, &path, x0, xhat0, dist, settings)
}

/// Reduced-order closed loop on a given switching path.
#[allow(clippy::too_many_arguments)]
pub fn simulate_reduced_order_on_path(
    p: &Plant,
    proto: &ReducedOrderProtocol,
    e: &TopologyEnsemble,
    path: &SwitchingPath,
    x0: &DVector<f64>,
    v0: &DVector<f64>,
    dist: &DisturbanceSpec,
    settings: &SimSettings,
) -> Result<Trajectory, SimError> {
    check_reduced_dims(p, proto)?;
    check_common(p, e, e.len(), x0, v0, p.n() - p.q1(), dist)?;
    check_path(path, settings, e.len())?;
    let sys = ReducedOrderLoop::new(p, proto, e, settings.observer_disturbance_feed);
    integrate(&sys, stack(x0, v0), path, dist, settings)
}

/// Reduced-order closed loop on a switching path sampled from `seed`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_reduced_order(
    p: &Plant,
    proto: &ReducedOrderProtocol,
    e: &TopologyEnsemble,
    g: &MarkovGenerator,
    x0: &DVector<f64>,
    v0: &DVector<f64>,
    dist: &DisturbanceSpec,
    settings: &SimSettings,
    seed: u64,
) -> Result<Trajectory, SimError> {
    check_reduced_dims(p, proto)?;
    check_common(p, e, g.n_states(), x0, v0, p.n() - p.q1(), dist)?;
    settings.n_steps()?;
    let path = sample_switching(g, settings.t_end, seed)?;
    simulate_reduced_order_on_path(p, proto, e, &path, x0, v0, dist, settings)
}
