//! Full-order and reduced-order observer-based consensus protocol synthesis
//! and certificate verification.

use std::fmt;

use nalgebra::{Complex, DMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::graphs::SpectralConstants;
use crate::matops::dense::{
    complex_rank, condition_number, eigenvalues, spectral_separation, sylvester_residual,
};
use crate::matops::{
    companion, is_hurwitz, max_sym_eigenvalue, min_sym_eigenvalue, poly_from_roots, spd_inverse,
    sylvester_solve, BlockLmi, FeasibilityProblem, MatError, Sense, SolveStatus, SolverOptions,
    Term,
};

pub const DEFAULT_RHO_GRID: [f64; 6] = [0.05, 0.1, 0.2, 0.5, 1.0, 1.5];

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("infeasible: {0}")]
    Infeasible(Box<SynthesisDiagnostics>),
    #[error("[C1; T] stayed singular after {attempts} draws of G")]
    SingularStack { attempts: usize },
    #[error("observer matrix shares an eigenvalue with A (separation {separation:.3e})")]
    SharedEigenvalues { separation: f64 },
    #[error("observer matrix is not Hurwitz")]
    ObserverNotHurwitz,
    #[error(transparent)]
    Matrix(#[from] MatError),
}

#[derive(Debug, Clone)]
pub struct Plant {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c1: DMatrix<f64>,
    pub c2: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl Plant {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c1: DMatrix<f64>,
        c2: DMatrix<f64>,
        d: DMatrix<f64>,
        r: DMatrix<f64>,
    ) -> Result<Self, SynthesisError> {
        let n = a.nrows();
        let mismatch = |what: &str| Err(SynthesisError::DimensionMismatch(what.to_string()));
        if n == 0 || a.ncols() != n {
            return mismatch("A must be square and nonempty");
        }
        if b.nrows() != n {
            return mismatch("B must have n rows");
        }
        if c1.ncols() != n || c2.ncols() != n {
            return mismatch("C1 and C2 must have n columns");
        }
        if d.nrows() != n {
            return mismatch("D must have n rows");
        }
        if r.shape() != (n, n) {
            return mismatch("R must be n x n");
        }
        let all = [&a, &b, &c1, &c2, &d, &r];
        if all.iter().any(|m| m.iter().any(|v| !v.is_finite())) {
            return Err(SynthesisError::InvalidParameter(
                "non-finite plant entry".into(),
            ));
        }
        if !crate::matops::is_positive_definite(&r).unwrap_or(false) {
            return Err(SynthesisError::InvalidParameter(
                "R must be symmetric positive definite".into(),
            ));
        }
        Ok(Plant { a, b, c1, c2, d, r })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }
    pub fn m(&self) -> usize {
        self.b.ncols()
    }
    pub fn q1(&self) -> usize {
        self.c1.nrows()
    }
    pub fn q2(&self) -> usize {
        self.c2.nrows()
    }
    pub fn l(&self) -> usize {
        self.d.ncols()
    }
}

/// PBH test for stabilizability of (A, B) and detectability of (C1, A).
pub fn check_stabilizable_detectable(p: &Plant) -> bool {
    let n = p.n();
    let to_c = |m: &DMatrix<f64>| m.map(|v| Complex::new(v, 0.0));
    let a = to_c(&p.a);
    let at = to_c(&p.a.transpose());
    let b = to_c(&p.b);
    let ct = to_c(&p.c1.transpose());
    for lam in eigenvalues(&p.a) {
        if lam.re < 0.0 {
            continue;
        }
        let shifted = |m: &DMatrix<Complex<f64>>| DMatrix::from_diagonal_element(n, n, lam) - m;
        let mut ctrl = DMatrix::zeros(n, n + p.m());
        ctrl.view_mut((0, 0), (n, n)).copy_from(&shifted(&a));
        ctrl.view_mut((0, n), (n, p.m())).copy_from(&b);
        let mut obs = DMatrix::zeros(n, n + p.q1());
        obs.view_mut((0, 0), (n, n)).copy_from(&shifted(&at));
        obs.view_mut((0, n), (n, p.q1())).copy_from(&ct);
        if complex_rank(&ctrl, 1e-8) < n || complex_rank(&obs, 1e-8) < n {
            return false;
        }
    }
    true
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TauChoice {
    GeometricMean,
    /// Used when strictly inside the admissible interval, otherwise the
    /// geometric mean.
    Preferred(f64),
}

impl TauChoice {
    fn pick(self, lo: f64, hi: f64) -> f64 {
        match self {
            TauChoice::Preferred(t) if t > lo && t < hi => t,
            _ => (lo * hi).sqrt(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RhoAttempt {
    pub rho: f64,
    pub step_a: Option<SolveStatus>,
    pub r1: Option<f64>,
    pub step_b: Option<SolveStatus>,
    pub r2: Option<f64>,
    pub interval: Option<(f64, f64)>,
    pub p1_condition: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct SynthesisDiagnostics {
    pub attempts: Vec<RhoAttempt>,
    pub notes: Vec<String>,
}

impl fmt::Display for SynthesisDiagnostics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4e}"));
        write!(f, "no rho gives a nonempty tau interval")?;
        for a in &self.attempts {
            write!(
                f,
                "\n  rho={:.3}: first LMI {:?} r1={} second LMI {:?} r2={}",
                a.rho,
                a.step_a,
                opt(a.r1),
                a.step_b,
                opt(a.r2)
            )?;
            if let Some((lo, hi)) = a.interval {
                write!(f, " tau in ({lo:.4e}, {hi:.4e})")?;
            }
        }
        for n in &self.notes {
            write!(f, "\n  note: {n}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FullOrderOptions {
    pub gamma: f64,
    pub rho_grid: Vec<f64>,
    pub tau: TauChoice,
    pub solver: SolverOptions,
}

impl FullOrderOptions {
    pub fn new(gamma: f64) -> Self {
        FullOrderOptions {
            gamma,
            rho_grid: DEFAULT_RHO_GRID.to_vec(),
            tau: TauChoice::GeometricMean,
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FullOrderProtocol {
    pub k_gain: DMatrix<f64>,
    pub l_gain: DMatrix<f64>,
    pub tau: f64,
    pub rho: f64,
    pub gamma: f64,
    pub p1: DMatrix<f64>,
    pub p2: DMatrix<f64>,
    pub r1: f64,
    pub r2: f64,
    pub y: DMatrix<f64>,
}

impl FullOrderProtocol {
    pub fn tau_interval(&self) -> (f64, f64) {
        full_order_tau_interval(self.r1, self.r2, self.rho)
    }
}

pub fn full_order_tau_interval(r1: f64, r2: f64, rho: f64) -> (f64, f64) {
    (r1 / (2.0 - rho), rho * r2 / 4.0)
}

pub fn reduced_order_tau_interval(
    r1: f64,
    r2: f64,
    rho: f64,
    sc: &SpectralConstants,
    pi_bar: f64,
) -> (f64, f64) {
    (
        r1 / (pi_bar * (sc.lambda_min2 - rho)),
        rho * r2 / (4.0 * pi_bar * sc.lambda_max),
    )
}

fn eye(n: usize) -> DMatrix<f64> {
    DMatrix::identity(n, n)
}

fn scalar_positive(
    prob: &mut FeasibilityProblem,
    v: crate::matops::VarId,
    name: &str,
) -> Result<(), MatError> {
    prob.add_terms(
        name,
        1,
        vec![Term::scaled(v, eye(1))],
        Sense::PositiveDefinite,
    )
}

fn check_gamma(gamma: f64) -> Result<(), SynthesisError> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(SynthesisError::InvalidParameter(format!(
            "gamma must be positive, got {gamma}"
        )));
    }
    Ok(())
}

fn check_network(sc: &SpectralConstants, pi_bar: f64) -> Result<(), SynthesisError> {
    if !(pi_bar > 0.0 && pi_bar <= 1.0) {
        return Err(SynthesisError::InvalidParameter(format!(
            "pi_bar must lie in (0, 1], got {pi_bar}"
        )));
    }
    if !(sc.kappa > 0.0 && sc.lambda_max.is_finite()) {
        return Err(SynthesisError::InvalidParameter(
            "invalid spectral constants".into(),
        ));
    }
    Ok(())
}

/// First LMI stage of the full-order design: variables (P1, r1), minimising r1.
fn full_step_one(
    p: &Plant,
    sc: &SpectralConstants,
    pi_bar: f64,
    gamma: f64,
    rho: f64,
    solver: &SolverOptions,
) -> Result<(SolveStatus, DMatrix<f64>, f64), SynthesisError> {
    let (n, l, q1, q2) = (p.n(), p.l(), p.q1(), p.q2());
    let mut prob = FeasibilityProblem::new();
    let p1 = prob.symmetric("P1", n);
    let r1 = prob.scalar("r1");

    let mut main = BlockLmi::new(&[n, l, q1, q2]);
    main.add_sym(0, Term::product(p.a.clone(), p1, eye(n)));
    main.add(0, 0, Term::scaled(r1, -(&p.b * p.b.transpose())));
    main.add(0, 1, Term::constant(p.d.clone()));
    main.add(0, 2, Term::product(eye(n), p1, p.c1.transpose()));
    main.add(0, 3, Term::product(eye(n), p1, p.c2.transpose()));
    main.add(1, 1, Term::constant(-eye(l) * (gamma * gamma / 2.0)));
    let c = 1.0 / (rho * (1.0 + pi_bar * pi_bar * sc.lambda_max));
    main.add(2, 2, Term::constant(-eye(q1) * c));
    main.add(3, 3, Term::constant(-eye(q2)));
    prob.add_block("main", &main, Sense::NegativeDefinite)?;

    let mut bound = BlockLmi::new(&[n, n]);
    bound.add(
        0,
        0,
        Term::constant(&p.r * (gamma * gamma / (2.0 * sc.kappa))),
    );
    bound.add(0, 1, Term::constant(eye(n)));
    bound.add(1, 1, Term::product(eye(n), p1, eye(n)));
    prob.add_block("bound", &bound, Sense::PositiveDefinite)?;
    scalar_positive(&mut prob, r1, "r1")?;
    prob.minimize_scalar(r1, 1.0);

    let res = prob.solve_minimize(solver);
    Ok((
        res.status,
        res.assignment.matrix(p1),
        res.assignment.scalar(r1),
    ))
}

/// Second LMI stage: variables (P2, Y, r2), maximising r2.
fn full_step_two(
    p: &Plant,
    sc: &SpectralConstants,
    gamma: f64,
    rho: f64,
    x: &DMatrix<f64>,
    solver: &SolverOptions,
) -> Result<(SolveStatus, DMatrix<f64>, DMatrix<f64>, f64), SynthesisError> {
    let (n, l, q1) = (p.n(), p.l(), p.q1());
    let mut prob = FeasibilityProblem::new();
    let p2 = prob.symmetric("P2", n);
    let y = prob.full("Y", n, q1);
    let r2 = prob.scalar("r2");
    let xbbx = x * &p.b * p.b.transpose() * x;
    let nu = xbbx.amax().max(f64::MIN_POSITIVE);

    let mut main = BlockLmi::new(&[n, l, q1]);
    main.add_sym(0, Term::product(p.a.transpose(), p2, eye(n)));
    main.add_sym(0, Term::product(eye(n), y, p.c1.clone()));
    main.add(0, 0, Term::scaled(r2, xbbx / nu));
    main.add(0, 1, Term::product(-eye(n), p2, p.d.clone()));
    main.add(0, 2, Term::product(eye(n), y, eye(q1)));
    main.add(1, 1, Term::constant(-eye(l) * (gamma * gamma / 2.0)));
    main.add(2, 2, Term::constant(-eye(q1) * (rho / 8.0)));
    prob.add_block("main", &main, Sense::NegativeDefinite)?;
    prob.add_terms(
        "upper",
        n,
        vec![
            Term::product(eye(n), p2, eye(n)),
            Term::constant(-&p.r * (gamma * gamma / (2.0 * sc.kappa))),
        ],
        Sense::NegativeDefinite,
    )?;
    prob.add_terms(
        "P2",
        n,
        vec![Term::product(eye(n), p2, eye(n))],
        Sense::PositiveDefinite,
    )?;
    scalar_positive(&mut prob, r2, "r2")?;
    prob.minimize_scalar(r2, -1.0);

    let res = prob.solve_minimize(solver);
    Ok((
        res.status,
        res.assignment.matrix(p2),
        res.assignment.matrix(y),
        res.assignment.scalar(r2) / nu,
    ))
}

pub fn synthesize_full_order(
    p: &Plant,
    sc: &SpectralConstants,
    pi_bar: f64,
    opts: &FullOrderOptions,
) -> Result<(FullOrderProtocol, SynthesisDiagnostics), SynthesisError> {
    check_gamma(opts.gamma)?;
    check_network(sc, pi_bar)?;
    if let Some(bad) = opts.rho_grid.iter().find(|r| !(**r > 0.0 && **r < 2.0)) {
        return Err(SynthesisError::InvalidParameter(format!(
            "rho = {bad} outside (0, 2)"
        )));
    }
    let mut diag = SynthesisDiagnostics::default();
    if !check_stabilizable_detectable(p) {
        diag.notes
            .push("plant is not stabilizable and detectable".into());
        return Err(SynthesisError::Infeasible(Box::new(diag)));
    }
    if !is_hurwitz(&p.a) {
        diag.notes.push(
            "A is not Hurwitz; adding the two LMIs with weight r1/r2 < rho(2-rho)/4 yields a Lyapunov \
             inequality for A, so no rho can give a nonempty tau interval"
                .into(),
        );
    }
    let mut grid = opts.rho_grid.clone();
    grid.sort_by(|a, b| a.total_cmp(b));

    for rho in grid {
        let mut att = RhoAttempt {
            rho,
            ..Default::default()
        };
        let (s1, p1, r1) = full_step_one(p, sc, pi_bar, opts.gamma, rho, &opts.solver)?;
        att.step_a = Some(s1);
        if s1 != SolveStatus::Feasible {
            diag.attempts.push(att);
            continue;
        }
        att.r1 = Some(r1);
        att.p1_condition = Some(condition_number(&p1));
        let x = spd_inverse(&p1)?;
        let (s2, p2, y, r2) = full_step_two(p, sc, opts.gamma, rho, &x, &opts.solver)?;
        att.step_b = Some(s2);
        if s2 != SolveStatus::Feasible {
            diag.attempts.push(att);
            continue;
        }
        att.r2 = Some(r2);
        let (lo, hi) = full_order_tau_interval(r1, r2, rho);
        att.interval = Some((lo, hi));
        diag.attempts.push(att);
        if !(lo > 0.0 && lo < hi) {
            continue;
        }
        let tau = opts.tau.pick(lo, hi);
        let k_gain = p.b.transpose() * &x;
        let l_gain = spd_inverse(&p2)? * &y;
        let proto = FullOrderProtocol {
            k_gain,
            l_gain,
            tau,
            rho,
            gamma: opts.gamma,
            p1,
            p2,
            r1,
            r2,
            y,
        };
        return Ok((proto, diag));
    }
    Err(SynthesisError::Infeasible(Box::new(diag)))
}

#[derive(Debug, Clone)]
pub struct CertificateReport {
    pub sigma1_max_eig: f64,
    pub sigma2_max_eig: f64,
    pub trace_cond_p1: bool,
    pub trace_cond_p2: bool,
    pub tau_interval: (f64, f64),
    pub tau: f64,
    /// Relative mismatch between stored gains and gains rebuilt from the
    /// certificates.
    pub gain_residual: f64,
    pub sylvester_residual: Option<f64>,
    pub identity_residual: Option<f64>,
    pub stack_condition: Option<f64>,
    pub passed: bool,
    pub failures: Vec<String>,
}

impl CertificateReport {
    fn finish(mut self) -> Self {
        let mut f = Vec::new();
        if !(self.sigma1_max_eig < 0.0) {
            f.push(format!(
                "first certificate max eigenvalue {:.3e} >= 0",
                self.sigma1_max_eig
            ));
        }
        if !(self.sigma2_max_eig < 0.0) {
            f.push(format!(
                "second certificate max eigenvalue {:.3e} >= 0",
                self.sigma2_max_eig
            ));
        }
        if !self.trace_cond_p1 {
            f.push("P1 bound violated".into());
        }
        if !self.trace_cond_p2 {
            f.push("P2 bound violated".into());
        }
        let (lo, hi) = self.tau_interval;
        if !(lo > 0.0 && self.tau > lo && self.tau < hi) {
            f.push(format!(
                "tau = {:.4e} not inside ({lo:.4e}, {hi:.4e})",
                self.tau
            ));
        }
        if !(self.gain_residual <= 1e-8) {
            f.push(format!(
                "stored gains differ from certificates ({:.3e})",
                self.gain_residual
            ));
        }
        if let Some(r) = self.sylvester_residual {
            if !(r <= 1e-8) {
                f.push(format!("Sylvester residual {r:.3e} > 1e-8"));
            }
        }
        if let Some(r) = self.identity_residual {
            if !(r <= 1e-8) {
                f.push(format!("Q1 C1 + Q2 T - I residual {r:.3e} > 1e-8"));
            }
        }
        if let Some(c) = self.stack_condition {
            if !(c < 1e8) {
                f.push(format!("[C1; T] condition number {c:.3e}"));
            }
        }
        self.passed = f.is_empty();
        self.failures = f;
        self
    }
}

impl fmt::Display for CertificateReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "sigma1_max_eig = {:.6e}", self.sigma1_max_eig)?;
        writeln!(f, "sigma2_max_eig = {:.6e}", self.sigma2_max_eig)?;
        writeln!(f, "trace_cond_p1 = {}", self.trace_cond_p1)?;
        writeln!(f, "trace_cond_p2 = {}", self.trace_cond_p2)?;
        writeln!(
            f,
            "tau_interval = ({:.6e}, {:.6e})",
            self.tau_interval.0, self.tau_interval.1
        )?;
        writeln!(f, "tau = {:.6e}", self.tau)?;
        writeln!(f, "gain_residual = {:.3e}", self.gain_residual)?;
        if let Some(r) = self.sylvester_residual {
            writeln!(f, "sylvester_residual = {r:.3e}")?;
        }
        if let Some(r) = self.identity_residual {
            writeln!(f, "identity_residual = {r:.3e}")?;
        }
        if let Some(c) = self.stack_condition {
            writeln!(f, "stack_condition = {c:.3e}")?;
        }
        writeln!(f, "passed = {}", self.passed)?;
        for e in &self.failures {
            writeln!(f, "failure: {e}")?;
        }
        Ok(())
    }
}

fn rel_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = b.norm().max(f64::MIN_POSITIVE);
    (a - b).norm() / scale
}

fn sym_block2(tl: DMatrix<f64>, tr: DMatrix<f64>, br: DMatrix<f64>) -> DMatrix<f64> {
    let (n, l) = (tl.nrows(), br.nrows());
    let mut m = DMatrix::zeros(n + l, n + l);
    m.view_mut((0, 0), (n, n)).copy_from(&tl);
    m.view_mut((0, n), (n, l)).copy_from(&tr);
    m.view_mut((n, 0), (l, n)).copy_from(&tr.transpose());
    m.view_mut((n, n), (l, l)).copy_from(&br);
    m
}

pub fn verify_full_order(
    proto: &FullOrderProtocol,
    p: &Plant,
    sc: &SpectralConstants,
    pi_bar: f64,
) -> Result<CertificateReport, SynthesisError> {
    let (n, l, q1, m) = (p.n(), p.l(), p.q1(), p.m());
    let shapes_ok = proto.k_gain.shape() == (m, n)
        && proto.l_gain.shape() == (n, q1)
        && proto.p1.shape() == (n, n)
        && proto.p2.shape() == (n, n)
        && proto.y.shape() == (n, q1);
    if !shapes_ok {
        return Err(SynthesisError::DimensionMismatch(
            "protocol does not match plant".into(),
        ));
    }
    let g2 = proto.gamma * proto.gamma / 2.0;
    let (tau, rho) = (proto.tau, proto.rho);
    let x = spd_inverse(&proto.p1).unwrap_or_else(|_| DMatrix::from_element(n, n, f64::NAN));
    let xbbx = &x * &p.b * p.b.transpose() * &x;
    let c = rho * (1.0 + pi_bar * pi_bar * sc.lambda_max);

    let s1_tl = p.a.transpose() * &x + &x * &p.a - &xbbx * (tau * (2.0 - rho))
        + p.c1.transpose() * &p.c1 * c
        + p.c2.transpose() * &p.c2;
    let sigma1 = sym_block2(s1_tl, &x * &p.d, -eye(l) * g2);

    let acl = &p.a + &proto.l_gain * &p.c1;
    let pl = &proto.p2 * &proto.l_gain;
    let s2_tl = acl.transpose() * &proto.p2
        + &proto.p2 * &acl
        + &xbbx * (4.0 / rho * tau)
        + &pl * pl.transpose() * (8.0 / rho);
    let sigma2 = sym_block2(s2_tl, -&proto.p2 * &p.d, -eye(l) * g2);

    let trace1 = max_sym_eigenvalue(&(&x * sc.kappa - &p.r * g2)) < 0.0
        && min_sym_eigenvalue(&proto.p1) > 0.0;
    let trace2 = max_sym_eigenvalue(&(&proto.p2 * sc.kappa - &p.r * g2)) < 0.0
        && min_sym_eigenvalue(&proto.p2) > 0.0;

    let k_ref = p.b.transpose() * &x;
    let l_ref = spd_inverse(&proto.p2)
        .map(|inv| inv * &proto.y)
        .unwrap_or_else(|_| proto.l_gain.map(|_| f64::NAN));
    let gain_residual = rel_diff(&proto.k_gain, &k_ref).max(rel_diff(&proto.l_gain, &l_ref));

    Ok(CertificateReport {
        sigma1_max_eig: max_sym_eigenvalue(&sigma1),
        sigma2_max_eig: max_sym_eigenvalue(&sigma2),
        trace_cond_p1: trace1,
        trace_cond_p2: trace2,
        tau_interval: proto.tau_interval(),
        tau,
        gain_residual,
        sylvester_residual: None,
        identity_residual: None,
        stack_condition: None,
        passed: false,
        failures: Vec::new(),
    }
    .finish())
}

#[derive(Debug, Clone)]
pub enum FBarSpec {
    Eigenvalues(Vec<Complex<f64>>),
    /// Monic characteristic polynomial coefficients `[c_0, ..., c_{k-1}]`.
    Coefficients(Vec<f64>),
    Matrix(DMatrix<f64>),
}

#[derive(Debug, Clone)]
pub enum GSpec {
    Matrix(DMatrix<f64>),
    /// Entries uniform on (0, 1) from a seeded stream.
    Random {
        seed: u64,
    },
}

#[derive(Debug, Clone)]
pub struct ReducedOrderOptions {
    pub gamma: f64,
    pub rho_grid: Vec<f64>,
    pub tau: TauChoice,
    pub f_bar: FBarSpec,
    pub g: GSpec,
    /// `alpha` in `(A + alpha I) P1 + P1 (A + alpha I)^T` for the first LMI.
    pub decay_rate: f64,
    /// Scale applied to G on each retry when the tau interval is empty.
    pub g_rescale: f64,
    pub max_rescales: usize,
    pub solver: SolverOptions,
}

impl ReducedOrderOptions {
    pub fn new(gamma: f64, f_bar: FBarSpec, g: GSpec) -> Self {
        ReducedOrderOptions {
            gamma,
            rho_grid: DEFAULT_RHO_GRID.to_vec(),
            tau: TauChoice::GeometricMean,
            f_bar,
            g,
            decay_rate: 0.0,
            g_rescale: 4.0,
            max_rescales: 12,
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReducedOrderProtocol {
    pub f_bar: DMatrix<f64>,
    pub g_gain: DMatrix<f64>,
    pub t_map: DMatrix<f64>,
    pub q1_map: DMatrix<f64>,
    pub q2_map: DMatrix<f64>,
    pub k_gain: DMatrix<f64>,
    pub tau: f64,
    pub rho: f64,
    pub gamma: f64,
    pub p1: DMatrix<f64>,
    pub p2: DMatrix<f64>,
    pub r1: f64,
    pub r2: f64,
}

pub fn build_f_bar(spec: &FBarSpec) -> Result<DMatrix<f64>, SynthesisError> {
    let f = match spec {
        FBarSpec::Eigenvalues(ev) => companion(&poly_from_roots(ev)?),
        FBarSpec::Coefficients(c) => companion(c),
        FBarSpec::Matrix(m) => {
            if !m.is_square() {
                return Err(SynthesisError::DimensionMismatch(
                    "F_bar must be square".into(),
                ));
            }
            m.clone()
        }
    };
    Ok(f)
}

fn stack(c1: &DMatrix<f64>, t: &DMatrix<f64>) -> DMatrix<f64> {
    let (q, k, n) = (c1.nrows(), t.nrows(), c1.ncols());
    let mut s = DMatrix::zeros(q + k, n);
    s.view_mut((0, 0), (q, n)).copy_from(c1);
    s.view_mut((q, 0), (k, n)).copy_from(t);
    s
}

/// Condition number of `[C1; T]` after scaling every row to unit norm.
pub fn stack_condition(c1: &DMatrix<f64>, t: &DMatrix<f64>) -> f64 {
    let mut s = stack(c1, t);
    for mut row in s.row_iter_mut() {
        let nrm = row.norm();
        if nrm > 0.0 {
            row /= nrm;
        }
    }
    condition_number(&s)
}

/// Solves the Sylvester equation for `g` and splits the inverse of
/// `[C1; T]` into `(Q1, Q2)`. Returns `None` when the stack is singular.
fn observer_maps(
    p: &Plant,
    f_bar: &DMatrix<f64>,
    g: &DMatrix<f64>,
) -> Result<Option<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)>, SynthesisError> {
    let t = sylvester_solve(&p.a, f_bar, &(g * &p.c1))?;
    if stack_condition(&p.c1, &t) >= 1e8 {
        return Ok(None);
    }
    let s = stack(&p.c1, &t);
    let Some(inv) = s.try_inverse() else {
        return Ok(None);
    };
    let q1 = inv.columns(0, p.q1()).into_owned();
    let q2 = inv.columns(p.q1(), f_bar.nrows()).into_owned();
    Ok(Some((t, q1, q2)))
}

fn reduced_step_two(
    p: &Plant,
    sc: &SpectralConstants,
    gamma: f64,
    alpha: f64,
    solver: &SolverOptions,
) -> Result<(SolveStatus, DMatrix<f64>, f64), SynthesisError> {
    let (n, l, q2) = (p.n(), p.l(), p.q2());
    let mut prob = FeasibilityProblem::new();
    let p1 = prob.symmetric("P1", n);
    let r1 = prob.scalar("r1");
    let mut main = BlockLmi::new(&[n, l, q2]);
    main.add_sym(0, Term::product(&p.a + eye(n) * alpha, p1, eye(n)));
    main.add(0, 0, Term::scaled(r1, -(&p.b * p.b.transpose())));
    main.add(0, 1, Term::constant(p.d.clone()));
    main.add(0, 2, Term::product(eye(n), p1, p.c2.transpose()));
    main.add(1, 1, Term::constant(-eye(l) * (gamma * gamma)));
    main.add(2, 2, Term::constant(-eye(q2)));
    prob.add_block("main", &main, Sense::NegativeDefinite)?;
    let mut bound = BlockLmi::new(&[n, n]);
    bound.add(0, 0, Term::constant(&p.r * (gamma * gamma / sc.kappa)));
    bound.add(0, 1, Term::constant(eye(n)));
    bound.add(1, 1, Term::product(eye(n), p1, eye(n)));
    prob.add_block("bound", &bound, Sense::PositiveDefinite)?;
    scalar_positive(&mut prob, r1, "r1")?;
    prob.minimize_scalar(r1, 1.0);
    let res = prob.solve_minimize(solver);
    Ok((
        res.status,
        res.assignment.matrix(p1),
        res.assignment.scalar(r1),
    ))
}

fn reduced_step_three(
    p: &Plant,
    sc: &SpectralConstants,
    gamma: f64,
    f_bar: &DMatrix<f64>,
    q2_map: &DMatrix<f64>,
    x: &DMatrix<f64>,
    solver: &SolverOptions,
) -> Result<(SolveStatus, DMatrix<f64>, f64), SynthesisError> {
    let k = f_bar.nrows();
    let mut prob = FeasibilityProblem::new();
    let p2 = prob.symmetric("P2", k);
    let r2 = prob.scalar("r2");
    let w = q2_map.transpose() * x * &p.b * p.b.transpose() * x * q2_map;
    let nu = w.amax().max(f64::MIN_POSITIVE);
    let cap = gamma * gamma / sc.kappa * min_sym_eigenvalue(&p.r);
    prob.add_terms(
        "main",
        k,
        vec![
            Term::product(f_bar.transpose(), p2, eye(k)),
            Term::product(eye(k), p2, f_bar.clone()),
            Term::scaled(r2, w / nu),
        ],
        Sense::NegativeDefinite,
    )?;
    prob.add_terms(
        "upper",
        k,
        vec![
            Term::product(eye(k), p2, eye(k)),
            Term::constant(-eye(k) * cap),
        ],
        Sense::NegativeDefinite,
    )?;
    prob.add_terms(
        "P2",
        k,
        vec![Term::product(eye(k), p2, eye(k))],
        Sense::PositiveDefinite,
    )?;
    scalar_positive(&mut prob, r2, "r2")?;
    prob.minimize_scalar(r2, -1.0);
    let res = prob.solve_minimize(solver);
    Ok((
        res.status,
        res.assignment.matrix(p2),
        res.assignment.scalar(r2) / nu,
    ))
}

pub fn synthesize_reduced_order(
    p: &Plant,
    sc: &SpectralConstants,
    pi_bar: f64,
    opts: &ReducedOrderOptions,
) -> Result<(ReducedOrderProtocol, SynthesisDiagnostics), SynthesisError> {
    check_gamma(opts.gamma)?;
    check_network(sc, pi_bar)?;
    let (n, q1) = (p.n(), p.q1());
    if q1 >= n {
        return Err(SynthesisError::DimensionMismatch(
            "reduced observer needs q1 < n".into(),
        ));
    }
    let k = n - q1;
    let mut diag = SynthesisDiagnostics::default();
    if !check_stabilizable_detectable(p) {
        diag.notes
            .push("plant is not stabilizable and detectable".into());
        return Err(SynthesisError::Infeasible(Box::new(diag)));
    }

    // Observer dynamics, gain and Sylvester solution.
    let f_bar = build_f_bar(&opts.f_bar)?;
    if f_bar.nrows() != k {
        return Err(SynthesisError::DimensionMismatch(format!(
            "F_bar must be {k}x{k}"
        )));
    }
    if !is_hurwitz(&f_bar) {
        return Err(SynthesisError::ObserverNotHurwitz);
    }
    let scale = p.a.amax().max(f_bar.amax()).max(1.0);
    let separation = spectral_separation(&p.a, &f_bar);
    if separation <= 1e-8 * scale {
        return Err(SynthesisError::SharedEigenvalues { separation });
    }
    const MAX_DRAWS: usize = 20;
    let (mut g, mut maps) = match &opts.g {
        GSpec::Matrix(g) => {
            if g.shape() != (k, q1) {
                return Err(SynthesisError::DimensionMismatch(format!(
                    "G must be {k}x{q1}"
                )));
            }
            let maps = observer_maps(p, &f_bar, g)?
                .ok_or(SynthesisError::SingularStack { attempts: 1 })?;
            (g.clone(), maps)
        }
        GSpec::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let mut found = None;
            for _ in 0..MAX_DRAWS {
                let g = DMatrix::from_fn(k, q1, |_, _| rng.random::<f64>());
                if let Some(maps) = observer_maps(p, &f_bar, &g)? {
                    found = Some((g, maps));
                    break;
                }
            }
            found.ok_or(SynthesisError::SingularStack {
                attempts: MAX_DRAWS,
            })?
        }
    };

    // Controller certificate, independent of G.
    let (s2, p1, r1) = reduced_step_two(p, sc, opts.gamma, opts.decay_rate, &opts.solver)?;
    if s2 != SolveStatus::Feasible {
        diag.attempts.push(RhoAttempt {
            step_a: Some(s2),
            ..Default::default()
        });
        return Err(SynthesisError::Infeasible(Box::new(diag)));
    }
    let x = spd_inverse(&p1)?;
    let p1_condition = condition_number(&p1);

    let mut grid: Vec<f64> = opts
        .rho_grid
        .iter()
        .copied()
        .filter(|r| *r > 0.0 && *r < sc.lambda_min2)
        .collect();
    grid.sort_by(|a, b| a.total_cmp(b));
    if grid.is_empty() {
        diag.notes.push(format!(
            "no rho in the grid lies in (0, {})",
            sc.lambda_min2
        ));
        return Err(SynthesisError::Infeasible(Box::new(diag)));
    }

    let mut total_scale = 1.0;
    let mut factor = opts.g_rescale;
    for retry in 0..=opts.max_rescales {
        if retry > 0 {
            g *= factor;
            total_scale *= factor;
            match observer_maps(p, &f_bar, &g)? {
                Some(m) => maps = m,
                None => {
                    diag.notes.push(format!(
                        "[C1; T] singular after rescaling G (retry {retry})"
                    ));
                    break;
                }
            }
        }
        let (t_map, q1_map, q2_map) = &maps;
        let (s3, p2, r2) = reduced_step_three(p, sc, opts.gamma, &f_bar, q2_map, &x, &opts.solver)?;
        // r2 grows with the square of the G scale, so the smallest
        // endpoint ratio fixes the next factor.
        let mut best_ratio = f64::INFINITY;
        for &rho in &grid {
            let mut att = RhoAttempt {
                rho,
                step_a: Some(s2),
                r1: Some(r1),
                step_b: Some(s3),
                p1_condition: Some(p1_condition),
                ..Default::default()
            };
            if s3 != SolveStatus::Feasible {
                diag.attempts.push(att);
                continue;
            }
            att.r2 = Some(r2);
            let (lo, hi) = reduced_order_tau_interval(r1, r2, rho, sc, pi_bar);
            att.interval = Some((lo, hi));
            diag.attempts.push(att);
            if hi > 0.0 {
                best_ratio = best_ratio.min(lo / hi);
            }
            if lo > 0.0 && lo < hi {
                if retry > 0 {
                    diag.notes.push(format!("G rescaled by {total_scale:.3e}"));
                }
                let proto = ReducedOrderProtocol {
                    f_bar: f_bar.clone(),
                    g_gain: g.clone(),
                    t_map: t_map.clone(),
                    q1_map: q1_map.clone(),
                    q2_map: q2_map.clone(),
                    k_gain: p.b.transpose() * &x,
                    tau: opts.tau.pick(lo, hi),
                    rho,
                    gamma: opts.gamma,
                    p1: p1.clone(),
                    p2,
                    r1,
                    r2,
                };
                return Ok((proto, diag));
            }
        }
        factor = if best_ratio.is_finite() {
            (2.0 * best_ratio.sqrt()).max(opts.g_rescale)
        } else {
            opts.g_rescale
        };
    }
    Err(SynthesisError::Infeasible(Box::new(diag)))
}

impl ReducedOrderProtocol {
    pub fn tau_interval(&self, sc: &SpectralConstants, pi_bar: f64) -> (f64, f64) {
        reduced_order_tau_interval(self.r1, self.r2, self.rho, sc, pi_bar)
    }
}

/// Re-checks every reduced-order inequality from the stored fields. The
/// first LMI is checked with the undamped `A`.
pub fn reduced_certificates(
    proto: &ReducedOrderProtocol,
    p: &Plant,
    sc: &SpectralConstants,
    pi_bar: f64,
) -> Result<CertificateReport, SynthesisError> {
    let (n, l, q1, q2, m) = (p.n(), p.l(), p.q1(), p.q2(), p.m());
    let k = n.checked_sub(q1).unwrap_or(0);
    let shapes_ok = k > 0
        && proto.f_bar.shape() == (k, k)
        && proto.g_gain.shape() == (k, q1)
        && proto.t_map.shape() == (k, n)
        && proto.q1_map.shape() == (n, q1)
        && proto.q2_map.shape() == (n, k)
        && proto.k_gain.shape() == (m, n)
        && proto.p1.shape() == (n, n)
        && proto.p2.shape() == (k, k);
    if !shapes_ok {
        return Err(SynthesisError::DimensionMismatch(
            "protocol does not match plant".into(),
        ));
    }
    let g2 = proto.gamma * proto.gamma;
    let x = spd_inverse(&proto.p1).unwrap_or_else(|_| DMatrix::from_element(n, n, f64::NAN));

    let dim = n + l + q2;
    let mut s1 = DMatrix::zeros(dim, dim);
    let tl = &proto.p1 * p.a.transpose() + &p.a * &proto.p1 - &p.b * p.b.transpose() * proto.r1;
    s1.view_mut((0, 0), (n, n)).copy_from(&tl);
    s1.view_mut((0, n), (n, l)).copy_from(&p.d);
    s1.view_mut((n, 0), (l, n)).copy_from(&p.d.transpose());
    let pc = &proto.p1 * p.c2.transpose();
    s1.view_mut((0, n + l), (n, q2)).copy_from(&pc);
    s1.view_mut((n + l, 0), (q2, n)).copy_from(&pc.transpose());
    s1.view_mut((n, n), (l, l)).copy_from(&(-eye(l) * g2));
    s1.view_mut((n + l, n + l), (q2, q2)).copy_from(&(-eye(q2)));

    let w = proto.q2_map.transpose() * &x * &p.b * p.b.transpose() * &x * &proto.q2_map;
    let s2 = proto.f_bar.transpose() * &proto.p2 + &proto.p2 * &proto.f_bar + w * proto.r2;

    let trace1 = max_sym_eigenvalue(&(&x * sc.kappa - &p.r * g2)) < 0.0
        && min_sym_eigenvalue(&proto.p1) > 0.0;
    let cap = g2 / sc.kappa * min_sym_eigenvalue(&p.r);
    let trace2 = max_sym_eigenvalue(&proto.p2) < cap && min_sym_eigenvalue(&proto.p2) > 0.0;

    let rhs = &proto.g_gain * &p.c1;
    let syl = sylvester_residual(&proto.t_map, &p.a, &proto.f_bar, &rhs);
    let ident = (&proto.q1_map * &p.c1 + &proto.q2_map * &proto.t_map - eye(n)).norm();
    let cond = stack_condition(&p.c1, &proto.t_map);
    let gain_residual = rel_diff(&proto.k_gain, &(p.b.transpose() * &x));

    let mut report = CertificateReport {
        sigma1_max_eig: max_sym_eigenvalue(&s1),
        sigma2_max_eig: max_sym_eigenvalue(&s2),
        trace_cond_p1: trace1,
        trace_cond_p2: trace2,
        tau_interval: proto.tau_interval(sc, pi_bar),
        tau: proto.tau,
        gain_residual,
        sylvester_residual: Some(syl),
        identity_residual: Some(ident),
        stack_condition: Some(cond),
        passed: false,
        failures: Vec::new(),
    }
    .finish();
    if !is_hurwitz(&proto.f_bar) {
        report.passed = false;
        report.failures.push("F_bar is not Hurwitz".into());
    }
    if !(proto.rho > 0.0 && proto.rho < sc.lambda_min2) {
        report.passed = false;
        report.failures.push(format!(
            "rho = {} outside (0, {})",
            proto.rho, sc.lambda_min2
        ));
    }
    Ok(report)
}
