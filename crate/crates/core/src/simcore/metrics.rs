use nalgebra::{DMatrix, DVector};

use crate::synthesis::Plant;

use super::{SimError, Trajectory};

/// Disagreement signals sampled on the trajectory grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusSignals {
    /// `zeta_i = x_i - mean_j x_j`.
    pub zeta: Vec<DVector<f64>>,
    /// Centred estimation error `(M (x) I)(xhat - x)`, with `xhat`
    /// reconstructed as `Q1 y + Q2 v` for the reduced observer.
    pub delta: Vec<DVector<f64>>,
    /// `z_tr,i = C2 zeta_i`.
    pub z_tr: Vec<DVector<f64>>,
}

impl ConsensusSignals {
    pub fn zeta_channel(&self, n: usize, agent: usize, channel: usize) -> Vec<f64> {
        self.zeta.iter().map(|z| z[agent * n + channel]).collect()
    }
}

/// Subtracts the agent average from an agent-major stacked vector.
fn centre(v: &DVector<f64>, n_agents: usize, n: usize) -> DVector<f64> {
    let mut mean = DVector::zeros(n);
    for i in 0..n_agents {
        mean += v.rows(i * n, n);
    }
    mean /= n_agents as f64;
    let mut out = v.clone();
    for i in 0..n_agents {
        let mut block = out.rows_mut(i * n, n);
        block -= &mean;
    }
    out
}

fn regulated(zeta: &DVector<f64>, c2: &DMatrix<f64>, n_agents: usize) -> DVector<f64> {
    let (q, n) = c2.shape();
    let mut z = DVector::zeros(n_agents * q);
    for i in 0..n_agents {
        z.rows_mut(i * q, q)
            .gemv(1.0, c2, &zeta.rows(i * n, n), 0.0);
    }
    z
}

pub fn consensus_signals(traj: &Trajectory, c2: &DMatrix<f64>) -> ConsensusSignals {
    let (na, n) = (traj.n_agents, traj.n);
    let zeta: Vec<DVector<f64>> = traj.states.iter().map(|x| centre(x, na, n)).collect();
    let delta = traj
        .estimates
        .iter()
        .zip(&traj.states)
        .map(|(e, x)| centre(&(e - x), na, n))
        .collect();
    let z_tr = zeta.iter().map(|z| regulated(z, c2, na)).collect();
    ConsensusSignals { zeta, delta, z_tr }
}

fn trapezoid(times: &[f64], f: &[f64]) -> f64 {
    times
        .windows(2)
        .zip(f.windows(2))
        .map(|(t, y)| 0.5 * (t[1] - t[0]) * (y[0] + y[1]))
        .sum()
}

/// `sqrt(mean over paths of ||zeta(t)||^2)` on the common grid.
pub fn rms_disagreement(trajs: &[Trajectory]) -> Vec<f64> {
    let Some(first) = trajs.first() else {
        return Vec::new();
    };
    let mut acc = vec![0.0; first.len()];
    for tr in trajs {
        for (a, x) in acc.iter_mut().zip(&tr.states) {
            *a += centre(x, tr.n_agents, tr.n).norm_squared();
        }
    }
    acc.iter().map(|a| (a / trajs.len() as f64).sqrt()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransientMetrics {
    pub overshoot: f64,
    pub settling_time: f64,
    pub oscillation_count: usize,
}

/// Transient figures of a sampled scalar signal against `reference`
/// (the last sample when `None`). The settling band is
/// `band * |reference - s(0)|`.
pub fn signal_metrics(
    times: &[f64],
    values: &[f64],
    band: f64,
    reference: Option<f64>,
) -> Result<TransientMetrics, SimError> {
    if times.len() != values.len() || times.is_empty() {
        return Err(SimError::DimensionMismatch(format!(
            "{} times but {} values",
            times.len(),
            values.len()
        )));
    }
    if !(band > 0.0 && band < 1.0) {
        return Err(SimError::InvalidParameter(format!(
            "settling band must lie in (0, 1), got {band}"
        )));
    }
    let last = *values.last().expect("nonempty");
    let fin = reference.unwrap_or(last);
    let step = fin - values[0];
    let tol = band * step.abs();
    let err: Vec<f64> = values.iter().map(|v| v - fin).collect();
    let end_dev = err.last().expect("nonempty").abs();
    if end_dev > tol {
        return Err(SimError::Unsettled {
            deviation: end_dev,
            band: tol,
        });
    }

    let settling_time = match err.iter().rposition(|e| e.abs() > tol) {
        None => times[0],
        Some(k) => {
            let (a, b) = (err[k].abs(), err[k + 1].abs());
            times[k] + (times[k + 1] - times[k]) * (a - tol) / (a - b)
        }
    };

    Ok(TransientMetrics {
        overshoot: overshoot(values, Some(fin)),
        settling_time,
        oscillation_count: oscillation_count(values, Some(fin)),
    })
}

/// Largest excursion beyond `reference` in the direction of the initial
/// step, relative to the step size.
pub fn overshoot(values: &[f64], reference: Option<f64>) -> f64 {
    let (Some(&first), Some(&last)) = (values.first(), values.last()) else {
        return 0.0;
    };
    let fin = reference.unwrap_or(last);
    let step = fin - first;
    if step == 0.0 {
        return 0.0;
    }
    let dir = step.signum();
    values
        .iter()
        .map(|v| (v - fin) * dir)
        .fold(0.0, f64::max)
        / step.abs()
}

/// Sign changes of `s - reference` after the first local extremum of `s`.
pub fn oscillation_count(values: &[f64], reference: Option<f64>) -> usize {
    let Some(&last) = values.last() else {
        return 0;
    };
    let fin = reference.unwrap_or(last);
    let first_peak = (1..values.len().saturating_sub(1))
        .find(|&k| (values[k] - values[k - 1]) * (values[k + 1] - values[k]) < 0.0);
    first_peak.map_or(0, |k0| {
        let mut prev = 0.0;
        let mut count = 0;
        for v in &values[k0..] {
            let e = v - fin;
            if e == 0.0 {
                continue;
            }
            if prev != 0.0 && e.signum() != prev {
                count += 1;
            }
            prev = e.signum();
        }
        count
    })
}
/// Transient figures of the raw state channel `x_agent[channel]`.
pub fn transient_metrics(
    traj: &Trajectory,
    agent: usize,
    channel: usize,
    settle_band: f64,
) -> Result<TransientMetrics, SimError> {
    if agent >= traj.n_agents || channel >= traj.n {
        return Err(SimError::InvalidParameter(format!(
            "agent {agent} / channel {channel} out of range ({} agents, {} states)",
            traj.n_agents, traj.n
        )));
    }
    signal_metrics(
        &traj.times,
        &traj.state_channel(agent, channel),
        settle_band,
        None,
    )
}

/// Monte-Carlo attenuation estimate over a set of runs of one scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct PerformanceReport {
    pub n_paths: usize,
    pub t_end: f64,
    /// Mean regulated energy divided by the disturbance and
    /// initial-disagreement energy.
    pub jtr_ratio: f64,
    pub gamma_squared: f64,
    pub passed: bool,
    pub numerator_mean: f64,
    /// Standard error of `jtr_ratio` across paths.
    pub std_error: f64,
    pub denominator: f64,
    /// Estimated contribution of `(t_end, inf)` to the ratio, from the
    /// decay rate of the regulated output over the second half of the
    /// horizon; infinite when it does not decay.
    pub tail_bound: f64,
    /// Sample mean of `||zeta||^2` at `t = 0` and at `t_end`.
    pub consensus_error_initial: f64,
    pub consensus_error_final: f64,
    /// Last exit of the RMS disagreement from 2% of its initial value;
    /// `None` when unsettled.
    pub settling_time: Option<f64>,
    /// Largest single-path settling time; `None` if any path is
    /// unsettled.
    pub worst_path_settling: Option<f64>,
    /// `(agent, channel, overshoot)` entries requested by the caller.
    pub overshoot: Vec<(usize, usize, f64)>,
}

pub const SETTLING_BAND: f64 = 0.02;

fn same_vector(a: &DVector<f64>, b: &DVector<f64>) -> bool {
    a.len() == b.len() && (a - b).amax() <= 1e-12 * (1.0 + a.amax())
}

pub fn jtr_ratio(
    trajs: &[Trajectory],
    p: &Plant,
    gamma: f64,
) -> Result<PerformanceReport, SimError> {
    let Some(first) = trajs.first() else {
        return Err(SimError::InvalidParameter("no trajectories".into()));
    };
    if !(gamma > 0.0) {
        return Err(SimError::InvalidParameter(format!("gamma must be positive, got {gamma}")));
    }
    if first.len() < 2 {
        return Err(SimError::InvalidParameter("trajectory has fewer than two samples".into()));
    }
    if p.n() != first.n || p.r.nrows() != first.n {
        return Err(SimError::DimensionMismatch("plant does not match trajectory".into()));
    }
    for (k, tr) in trajs.iter().enumerate().skip(1) {
        let same = tr.times == first.times
            && same_vector(&tr.states[0], &first.states[0])
            && same_vector(&tr.estimates[0], &first.estimates[0])
            && tr
                .disturbance
                .iter()
                .zip(&first.disturbance)
                .all(|(a, b)| same_vector(a, b));
        if !same {
            return Err(SimError::ScenarioMismatch(format!(
                "path {k} differs from path 0 in grid, initial state or disturbance"
            )));
        }
    }

    let (na, n) = (first.n_agents, first.n);
    let w_energy: Vec<f64> = first.disturbance.iter().map(|w| w.norm_squared()).collect();
    let weighted = |v: &DVector<f64>| -> f64 {
        let c = centre(v, na, n);
        (0..na)
            .map(|i| {
                let ci = c.rows(i * n, n);
                (ci.transpose() * &p.r * ci)[(0, 0)]
            })
            .sum()
    };
    let denominator = trapezoid(&first.times, &w_energy)
        + weighted(&first.states[0])
        + weighted(&first.estimates[0]);
    // centring identical agents leaves only rounding residue
    let raw = first.states[0].norm_squared() + first.estimates[0].norm_squared();
    if !(denominator > 1e-24 * (1.0 + raw) * p.r.norm()) {
        return Err(SimError::ZeroDenominator);
    }

    let n_paths = trajs.len();
    let mut nums = Vec::with_capacity(n_paths);
    let mut z_half = 0.0;
    let mut z_end = 0.0;
    let mut zeta0 = 0.0;
    let mut zeta_end = 0.0;
    let half = first.len() / 2;
    let mut worst = Some(0.0f64);
    for tr in trajs {
        let sig = consensus_signals(tr, &p.c2);
        let energy: Vec<f64> = sig.z_tr.iter().map(|z| z.norm_squared()).collect();
        nums.push(trapezoid(&tr.times, &energy));
        z_half += energy[half];
        z_end += energy[energy.len() - 1];
        let norms: Vec<f64> = sig.zeta.iter().map(|z| z.norm()).collect();
        zeta0 += norms[0] * norms[0];
        zeta_end += norms[norms.len() - 1].powi(2);
        worst = match (worst, signal_metrics(&tr.times, &norms, SETTLING_BAND, Some(0.0))) {
            (Some(w), Ok(m)) => Some(w.max(m.settling_time)),
            _ => None,
        };
    }
    let np = n_paths as f64;
    let numerator_mean = nums.iter().sum::<f64>() / np;
    let var = if n_paths > 1 {
        nums.iter().map(|v| (v - numerator_mean).powi(2)).sum::<f64>() / (np - 1.0)
    } else {
        0.0
    };
    let (z_half, z_end) = (z_half / np, z_end / np);
    let span = first.times[first.len() - 1] - first.times[half];
    let tail_energy = if z_end == 0.0 {
        0.0
    } else {
        // ||z||^2 ~ exp(-2 lambda t)  =>  tail integral = ||z(t_end)||^2 / (2 lambda)
        let two_lambda = (z_half / z_end).ln() / span;
        if two_lambda > 0.0 && two_lambda.is_finite() {
            z_end / two_lambda
        } else {
            f64::INFINITY
        }
    };

    let rms = rms_disagreement(trajs);
    let settling_time = signal_metrics(&first.times, &rms, SETTLING_BAND, Some(0.0))
        .ok()
        .map(|m| m.settling_time);
    let jtr = numerator_mean / denominator;
    let gamma_squared = gamma * gamma;
    Ok(PerformanceReport {
        n_paths,
        t_end: first.t_end(),
        jtr_ratio: jtr,
        gamma_squared,
        passed: jtr < gamma_squared,
        numerator_mean,
        std_error: (var / np).sqrt() / denominator,
        denominator,
        tail_bound: tail_energy / denominator,
        consensus_error_initial: zeta0 / np,
        consensus_error_final: zeta_end / np,
        settling_time,
        worst_path_settling: worst,
        overshoot: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_signal_is_settled_immediately() {
        let t: Vec<f64> = (0..50).map(|k| k as f64 * 0.1).collect();
        let v = vec![3.0; 50];
        let m = signal_metrics(&t, &v, 0.02, None).unwrap();
        assert_eq!(m.overshoot, 0.0);
        assert_eq!(m.settling_time, 0.0);
        assert_eq!(m.oscillation_count, 0);
    }

    #[test]
    fn unsettled_signal_is_reported() {
        let t: Vec<f64> = (0..50).map(|k| k as f64 * 0.1).collect();
        let v: Vec<f64> = t.iter().map(|s| (-0.1 * s).exp()).collect();
        assert!(matches!(
            signal_metrics(&t, &v, 0.02, Some(0.0)),
            Err(SimError::Unsettled { .. })
        ));
    }

    #[test]
    fn first_order_step_has_no_overshoot() {
        let t: Vec<f64> = (0..=2000).map(|k| k as f64 * 0.005).collect();
        let v: Vec<f64> = t.iter().map(|s| 1.0 - (-s).exp()).collect();
        let m = signal_metrics(&t, &v, 0.02, Some(1.0)).unwrap();
        assert_eq!(m.overshoot, 0.0);
        assert!((m.settling_time - 50f64.ln()).abs() < 1e-4);
        assert_eq!(m.oscillation_count, 0);
    }

    #[test]
    fn trapezoid_is_exact_on_lines() {
        let t = [0.0, 0.5, 2.0];
        assert!((trapezoid(&t, &[1.0, 2.0, 5.0]) - 6.0).abs() < 1e-15);
    }
}
