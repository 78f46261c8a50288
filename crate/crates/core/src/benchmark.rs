//! Four-helicopter formation benchmark: 11-state linearised rotorcraft
//! model, two switching directed topologies on four agents, and a
//! two-state Markov generator.

use nalgebra::{DMatrix, DVector};

use crate::graphs::{Digraph, GraphError, TopologyEnsemble};
use crate::markov::MarkovGenerator;
use crate::simcore::{random_initial_states, DisturbanceSpec};
use crate::synthesis::{
    FBarSpec, FullOrderOptions, GSpec, Plant, ReducedOrderOptions, ReducedOrderProtocol, TauChoice,
};

pub const N_AGENTS: usize = 4;
pub const GAMMA: f64 = 4.0;
pub const TAU: f64 = 1.4;
pub const SQUARE_WAVE_PERIOD: f64 = 2.0 * std::f64::consts::PI;
/// Pitch angle is the fourth state (zero-based index 3).
pub const PITCH_STATE: usize = 3;
/// Decay rate for the reduced-order first LMI; see [`reduced_options`].
pub const REDUCED_DECAY_RATE: f64 = 1.0;
pub const HORIZON: f64 = 20.0;
/// Master seed for the switching paths of the benchmark runs.
pub const PATH_SEED: u64 = 7;
/// Seed for [`initial_states`].
pub const INITIAL_SEED: u64 = 2024;

#[rustfmt::skip]
const A: [f64; 121] = [
    -0.1778, 0.0, 0.0, 0.0, 0.0, -9.7807, -9.7807, 0.0, 0.0, 0.0, 0.0,
    0.0, -0.3104, 0.0, 0.0, 9.7807, 0.0, 0.0, 9.7807, 0.0, 0.0, 0.0,
    -0.3326, -0.5353, 0.0, 0.0, 0.0, 0.0, 75.7640, 343.8600, 0.0, 0.0, 0.0,
    0.1903, -0.2940, 0.0, 0.0, 0.0, 0.0, 172.6200, -59.9580, 0.0, 0.0, 0.0,
    0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
    0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
    0.0, 0.0, 0.0, -1.0, 0.0, 0.0, -8.1222, 4.6535, 0.0, 0.0, 0.0,
    0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -0.0921, -8.1222, 0.0, 0.0, 0.0,
    0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 17.1680, 7.1018, -0.6821, -0.1070, 0.0,
    0.0, 0.0, -0.2834, 0.0, 0.0, 0.0, 0.0, 0.0, -0.1446, -5.5561, -36.6740,
    0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.7492, -11.1120,
];

/// Characteristic polynomial coefficients `[c_0, ..., c_5]` of the
/// reduced observer matrix (eigenvalues -3, -1.2, -0.8, each doubled).
pub const F_BAR_COEFFS: [f64; 6] = [8.2944, 40.0896, 77.2416, 75.3600, 38.9200, 10.0];

#[rustfmt::skip]
const G_OBSERVER: [f64; 30] = [
    0.3435, 0.2485, 0.6139, 0.1746, 0.3182,
    0.6631, 0.9087, 0.6521, 0.0599, 0.9556,
    0.5162, 0.8895, 0.6013, 0.1524, 0.0290,
    0.7967, 0.9898, 0.7978, 0.3834, 0.3972,
    0.5766, 0.3237, 0.6104, 0.0131, 0.2728,
    0.0669, 0.9874, 0.3772, 0.9654, 0.3619,
];

pub fn a() -> DMatrix<f64> {
    DMatrix::from_row_slice(11, 11, &A)
}

pub fn b() -> DMatrix<f64> {
    let mut b = DMatrix::zeros(11, 3);
    b[(6, 0)] = 0.0632;
    b[(6, 1)] = 3.3390;
    b[(7, 0)] = 3.1739;
    b[(7, 1)] = 0.2216;
    b[(9, 2)] = -74.364;
    b
}

pub fn d() -> DMatrix<f64> {
    let mut d = DMatrix::zeros(11, 2);
    d[(0, 0)] = -0.1778;
    d[(1, 1)] = -0.3104;
    d[(2, 0)] = -0.3326;
    d[(2, 1)] = -0.5353;
    d[(3, 0)] = 0.1903;
    d[(3, 1)] = -0.2940;
    d
}

/// Measured and regulated outputs select states 5, 6, 10, 3 and 4
/// (one-based).
pub fn c() -> DMatrix<f64> {
    let mut c = DMatrix::zeros(5, 11);
    for (row, col) in [4, 5, 9, 2, 3].into_iter().enumerate() {
        c[(row, col)] = 1.0;
    }
    c
}

pub fn plant() -> Plant {
    Plant::new(a(), b(), c(), c(), d(), DMatrix::identity(11, 11))
        .expect("embedded plant is consistent")
}

pub fn generator() -> MarkovGenerator {
    MarkovGenerator::new(DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 2.0, -2.0]))
        .expect("embedded generator is valid")
}

/// Directed 3-cycles 1->2->3->1 and 1->3->4->1 with unit weights.
pub fn topologies() -> Result<TopologyEnsemble, GraphError> {
    let g1 = Digraph::from_edges(N_AGENTS, &[(0, 1), (1, 2), (2, 0)])?;
    let g2 = Digraph::from_edges(N_AGENTS, &[(0, 2), (2, 3), (3, 0)])?;
    TopologyEnsemble::new(vec![g1, g2])
}

/// Observer gain that comes with the benchmark data (6 x 5).
pub fn g_observer() -> DMatrix<f64> {
    DMatrix::from_row_slice(6, 5, &G_OBSERVER)
}

pub fn full_options() -> FullOrderOptions {
    let mut o = FullOrderOptions::new(GAMMA);
    o.tau = TauChoice::Preferred(TAU);
    o
}

/// Companion observer matrix, benchmark G, and a unit decay rate (the
/// zero-rate solution has closed-loop modes near -0.15 rad/s).
pub fn reduced_options() -> ReducedOrderOptions {
    let mut o = ReducedOrderOptions::new(
        GAMMA,
        FBarSpec::Coefficients(F_BAR_COEFFS.to_vec()),
        GSpec::Matrix(g_observer()),
    );
    o.tau = TauChoice::Preferred(TAU);
    o.decay_rate = REDUCED_DECAY_RATE;
    o
}

/// Square wave of period 2 pi and unit amplitude on both disturbance
/// channels of every agent.
pub fn disturbance() -> DisturbanceSpec {
    DisturbanceSpec::square_wave(2, SQUARE_WAVE_PERIOD)
}

/// Initial plant and observer states for the benchmark runs: `x0` and
/// `xhat0` uniform in `[-1, 1]^n` per agent from streams `seed` and
/// `seed + 1`.
pub fn initial_states(seed: u64) -> (DVector<f64>, DVector<f64>) {
    (
        random_initial_states(N_AGENTS, 11, seed),
        random_initial_states(N_AGENTS, 11, seed.wrapping_add(1)),
    )
}

/// `v0 = T xhat0` agent by agent.
pub fn reduced_initial_observer(proto: &ReducedOrderProtocol, xhat0: &DVector<f64>) -> DVector<f64> {
    let n = proto.t_map.ncols();
    let nv = proto.t_map.nrows();
    let na = xhat0.len() / n;
    let mut v0 = DVector::zeros(na * nv);
    for i in 0..na {
        v0.rows_mut(i * nv, nv)
            .copy_from(&(&proto.t_map * xhat0.rows(i * n, n)));
    }
    v0
}
