//! Continuous-time Markov switching: generator validation, the invariant
//! distribution, ergodicity and seeded sampling of switching paths.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MarkovError {
    #[error("generator must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("generator must have at least one state")]
    Empty,
    #[error("negative off-diagonal rate {value} at ({row}, {col})")]
    NegativeOffDiagonal { row: usize, col: usize, value: f64 },
    #[error("row {row} sums to {sum}, expected 0")]
    RowSumNonzero { row: usize, sum: f64 },
    #[error("non-finite rate at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("switching chain is not ergodic (state graph not strongly connected)")]
    NotErgodic,
    #[error("least-squares solve for the invariant distribution failed")]
    SolveFailed,
    #[error("initial state {state} out of range for {n_states} states")]
    BadInitialState { state: usize, n_states: usize },
    #[error("horizon must be positive, got {0}")]
    BadHorizon(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarkovGenerator {
    q: DMatrix<f64>,
}

impl MarkovGenerator {
    pub fn new(q: DMatrix<f64>) -> Result<Self, MarkovError> {
        validate_generator(q)
    }

    pub fn n_states(&self) -> usize {
        self.q.nrows()
    }

    pub fn rates(&self) -> &DMatrix<f64> {
        &self.q
    }

    /// Total exit rate `-q_ii` of `state`.
    pub fn exit_rate(&self, state: usize) -> f64 {
        -self.q[(state, state)]
    }

    pub fn is_ergodic(&self) -> bool {
        is_ergodic(self)
    }

    pub fn stationary_distribution(&self) -> Result<StationaryDistribution, MarkovError> {
        stationary_distribution(self)
    }
}

pub fn validate_generator(q: DMatrix<f64>) -> Result<MarkovGenerator, MarkovError> {
    let (rows, cols) = q.shape();
    if rows != cols {
        return Err(MarkovError::NotSquare { rows, cols });
    }
    if rows == 0 {
        return Err(MarkovError::Empty);
    }
    for i in 0..rows {
        for j in 0..cols {
            let v = q[(i, j)];
            if !v.is_finite() {
                return Err(MarkovError::NonFinite { row: i, col: j });
            }
            if i != j && v < 0.0 {
                return Err(MarkovError::NegativeOffDiagonal {
                    row: i,
                    col: j,
                    value: v,
                });
            }
        }
    }
    let scale = q.amax();
    for i in 0..rows {
        let sum: f64 = q.row(i).sum();
        if sum.abs() > 1e-12 * scale {
            return Err(MarkovError::RowSumNonzero { row: i, sum });
        }
    }
    Ok(MarkovGenerator { q })
}

/// True iff the directed graph with an edge `i -> j` whenever `q_ij > 0`
/// is strongly connected.
pub fn is_ergodic(g: &MarkovGenerator) -> bool {
    let n = g.n_states();
    let forward = |u: usize, v: usize| g.q[(u, v)] > 0.0;
    let backward = |u: usize, v: usize| g.q[(v, u)] > 0.0;
    reaches_all(n, forward) && reaches_all(n, backward)
}

fn reaches_all(n: usize, edge: impl Fn(usize, usize) -> bool) -> bool {
    let mut seen = vec![false; n];
    let mut stack = vec![0usize];
    seen[0] = true;
    while let Some(u) = stack.pop() {
        for v in 0..n {
            if v != u && !seen[v] && edge(u, v) {
                seen[v] = true;
                stack.push(v);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationaryDistribution {
    pub pi: DVector<f64>,
    /// Smallest entry of `pi`.
    pub pi_bar: f64,
}

/// Solves `[Q^T; 1^T] pi = [0; 1]` in the least-squares sense.
pub fn stationary_distribution(g: &MarkovGenerator) -> Result<StationaryDistribution, MarkovError> {
    if !is_ergodic(g) {
        return Err(MarkovError::NotErgodic);
    }
    let s = g.n_states();
    let mut lhs = DMatrix::zeros(s + 1, s);
    lhs.view_mut((0, 0), (s, s)).copy_from(&g.q.transpose());
    lhs.row_mut(s).fill(1.0);
    let mut rhs = DVector::zeros(s + 1);
    rhs[s] = 1.0;

    let svd = lhs.svd(true, true);
    let mut pi = svd
        .solve(&rhs, 1e-14)
        .map_err(|_| MarkovError::SolveFailed)?;
    // Clean the round-off sign and renormalise; for an ergodic chain every
    // entry is strictly positive.
    pi.iter_mut().for_each(|p| *p = p.max(0.0));
    let total = pi.sum();
    if !(total.is_finite() && total > 0.0) {
        return Err(MarkovError::SolveFailed);
    }
    pi /= total;
    let pi_bar = pi.min();
    Ok(StationaryDistribution { pi, pi_bar })
}

/// A right-continuous piecewise-constant path of the switching signal on
/// `[0, t_end)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SwitchingPath {
    /// `jump_times[0] == 0`; state `states[k]` holds on
    /// `[jump_times[k], jump_times[k + 1])`.
    pub jump_times: Vec<f64>,
    pub states: Vec<usize>,
    pub t_end: f64,
}

impl SwitchingPath {
    /// A path that never leaves `state`.
    pub fn constant(state: usize, t_end: f64) -> Self {
        Self {
            jump_times: vec![0.0],
            states: vec![state],
            t_end,
        }
    }

    /// State active at time `t` (right-continuous).
    pub fn state_at(&self, t: f64) -> usize {
        let k = self.jump_times.partition_point(|&s| s <= t);
        self.states[k.saturating_sub(1)]
    }

    /// Jump times strictly inside `(t0, t1)`.
    pub fn jumps_between(&self, t0: f64, t1: f64) -> impl Iterator<Item = f64> + '_ {
        let start = self.jump_times.partition_point(|&s| s <= t0);
        self.jump_times[start..]
            .iter()
            .copied()
            .take_while(move |&s| s < t1)
    }

    /// Total time spent in each state over `[0, t_end)`.
    pub fn occupation_times(&self, n_states: usize) -> Vec<f64> {
        let mut occ = vec![0.0; n_states];
        for (k, &state) in self.states.iter().enumerate() {
            let end = self.jump_times.get(k + 1).copied().unwrap_or(self.t_end);
            occ[state] += end - self.jump_times[k];
        }
        occ
    }

    /// Sojourn lengths of completed visits to `state` (the final,
    /// horizon-censored visit is excluded).
    pub fn sojourns(&self, state: usize) -> Vec<f64> {
        (0..self.states.len().saturating_sub(1))
            .filter(|&k| self.states[k] == state)
            .map(|k| self.jump_times[k + 1] - self.jump_times[k])
            .collect()
    }
}

/// Samples a path with exponential holding times of rate `-q_ii` and jumps
/// `i -> j` with probability `q_ij / -q_ii`.
pub fn sample_path(
    g: &MarkovGenerator,
    initial_state: usize,
    t_end: f64,
    seed: u64,
) -> Result<SwitchingPath, MarkovError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_path_with(g, initial_state, t_end, &mut rng)
}

pub fn sample_path_with<R: Rng + ?Sized>(
    g: &MarkovGenerator,
    initial_state: usize,
    t_end: f64,
    rng: &mut R,
) -> Result<SwitchingPath, MarkovError> {
    let s = g.n_states();
    if initial_state >= s {
        return Err(MarkovError::BadInitialState {
            state: initial_state,
            n_states: s,
        });
    }
    if !(t_end > 0.0 && t_end.is_finite()) {
        return Err(MarkovError::BadHorizon(t_end));
    }
    let mut jump_times = vec![0.0];
    let mut states = vec![initial_state];
    let mut t = 0.0;
    let mut state = initial_state;
    loop {
        let rate = g.exit_rate(state);
        if rate <= 0.0 {
            break;
        }
        let hold = Exp::new(rate).expect("positive rate").sample(rng);
        t += hold;
        if t >= t_end {
            break;
        }
        let mut u = rng.random::<f64>() * rate;
        let mut next = state;
        for j in (0..s).filter(|&j| j != state) {
            let q = g.q[(state, j)];
            if q <= 0.0 {
                continue;
            }
            next = j;
            if u < q {
                break;
            }
            u -= q;
        }
        state = next;
        jump_times.push(t);
        states.push(state);
    }
    Ok(SwitchingPath {
        jump_times,
        states,
        t_end,
    })
}

/// Draws a state index from the probability vector `pi`.
pub fn sample_state<R: Rng + ?Sized>(pi: &DVector<f64>, rng: &mut R) -> usize {
    let mut u = rng.random::<f64>();
    for (i, &p) in pi.iter().enumerate() {
        if u < p {
            return i;
        }
        u -= p;
    }
    pi.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn two_state_chain() -> MarkovGenerator {
        MarkovGenerator::new(DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 2.0, -2.0])).unwrap()
    }

    #[test]
    fn validates_generators() {
        assert!(MarkovGenerator::new(DMatrix::zeros(2, 2)).is_ok());
        assert!(matches!(
            MarkovGenerator::new(DMatrix::from_row_slice(2, 2, &[-1.0, 2.0, 1.0, -1.0])),
            Err(MarkovError::RowSumNonzero { row: 0, .. })
        ));
        assert!(matches!(
            MarkovGenerator::new(DMatrix::from_row_slice(2, 2, &[1.0, -1.0, 0.0, 0.0])),
            Err(MarkovError::NegativeOffDiagonal { .. })
        ));
    }

    #[test]
    fn ergodicity() {
        assert!(two_state_chain().is_ergodic());
        let absorbing =
            MarkovGenerator::new(DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, -1.0])).unwrap();
        assert!(!absorbing.is_ergodic());
        let cycle = MarkovGenerator::new(DMatrix::from_row_slice(
            3,
            3,
            &[-1.0, 1.0, 0.0, 0.0, -1.0, 1.0, 1.0, 0.0, -1.0],
        ))
        .unwrap();
        assert!(cycle.is_ergodic());
        assert_eq!(
            absorbing.stationary_distribution(),
            Err(MarkovError::NotErgodic)
        );
    }

    #[test]
    fn two_state_chain_distribution() {
        let d = two_state_chain().stationary_distribution().unwrap();
        assert_abs_diff_eq!(d.pi[0], 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d.pi[1], 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d.pi_bar, 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn symmetric_chain_is_uniform() {
        for a in [0.1, 1.0, 37.0] {
            let g = MarkovGenerator::new(DMatrix::from_row_slice(2, 2, &[-a, a, a, -a])).unwrap();
            let d = g.stationary_distribution().unwrap();
            assert_abs_diff_eq!(d.pi[0], 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn random_three_state_matches_matrix_exponential_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let mut q = DMatrix::from_fn(3, 3, |i, j| {
                if i == j {
                    0.0
                } else {
                    0.1 + rng.random::<f64>()
                }
            });
            for i in 0..3 {
                let s: f64 = q.row(i).sum();
                q[(i, i)] = -s;
            }
            let g = MarkovGenerator::new(q.clone()).unwrap();
            let d = g.stationary_distribution().unwrap();
            let residual = (d.pi.transpose() * &q).amax();
            assert!(residual <= 1e-10);
            let limit = (q * 200.0).exp();
            for i in 0..3 {
                for j in 0..3 {
                    assert_abs_diff_eq!(limit[(i, j)], d.pi[j], epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn zero_generator_never_switches() {
        let g = MarkovGenerator::new(DMatrix::zeros(3, 3)).unwrap();
        let p = sample_path(&g, 2, 10.0, 5).unwrap();
        assert_eq!(p, SwitchingPath::constant(2, 10.0));
    }

    #[test]
    fn paths_are_reproducible_and_alternate() {
        let g = two_state_chain();
        let a = sample_path(&g, 0, 50.0, 42).unwrap();
        let b = sample_path(&g, 0, 50.0, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, sample_path(&g, 0, 50.0, 43).unwrap());
        assert!(a.jump_times.windows(2).all(|w| w[0] < w[1]));
        assert!(a.states.windows(2).all(|w| w[0] != w[1]));
        assert_eq!(a.state_at(0.0), 0);
        assert_eq!(a.state_at(a.jump_times[1]), a.states[1]);
    }

    #[test]
    fn mean_holding_time_in_first_state() {
        let g = two_state_chain();
        // Exp(1) sojourns; about 1.5 time units per visit pair, so 1.6e5
        // time units gives a little over 1e5 completed visits.
        let p = sample_path(&g, 0, 1.6e5, 7).unwrap();
        let s = p.sojourns(0);
        assert!(s.len() >= 100_000, "{} sojourns", s.len());
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean holding time {mean}");
    }

    #[test]
    fn occupation_fraction_converges_to_pi() {
        let g = two_state_chain();
        for seed in 0..3 {
            let p = sample_path(&g, 1, 1e4, seed).unwrap();
            let occ = p.occupation_times(2);
            let frac = occ[0] / 1e4;
            assert!((frac - 2.0 / 3.0).abs() < 0.02, "fraction {frac}");
        }
    }

    #[test]
    fn sample_state_follows_pi() {
        let pi = DVector::from_vec(vec![0.25, 0.75]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let hits = (0..40_000)
            .filter(|_| sample_state(&pi, &mut rng) == 0)
            .count();
        assert!((hits as f64 / 40_000.0 - 0.25).abs() < 0.01);
    }
}
