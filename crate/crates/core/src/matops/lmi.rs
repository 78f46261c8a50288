//! Small-scale LMI feasibility and linear-objective solver.
//!
//! Constraints are affine symmetric matrix functions of the decision
//! vector. The solver is a primal log-det barrier method: a Phase I
//! problem maximises the common slack `s` in `S_i(x) >= s I`, and an
//! optional Phase II minimises a linear objective while keeping every
//! constraint at least `margin` inside its cone.

use nalgebra::{Cholesky, DMatrix, DVector};

use super::dense::{is_symmetric, min_sym_eigenvalue, symmetrize};
use super::MatError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarShape {
    Scalar,
    Symmetric(usize),
    Full(usize, usize),
}

impl VarShape {
    fn n_entries(self) -> usize {
        match self {
            VarShape::Scalar => 1,
            VarShape::Symmetric(n) => n * (n + 1) / 2,
            VarShape::Full(r, c) => r * c,
        }
    }
}

#[derive(Debug, Clone)]
struct VarDecl {
    name: String,
    shape: VarShape,
    offset: usize,
}

/// `F(x) = F_0 + sum_k x_k F_k`, with only the nonzero `F_k` stored.
#[derive(Debug, Clone)]
pub struct AffineMatrixExpr {
    pub constant: DMatrix<f64>,
    pub terms: Vec<(usize, DMatrix<f64>)>,
}

impl AffineMatrixExpr {
    pub fn dim(&self) -> usize {
        self.constant.nrows()
    }

    pub fn evaluate(&self, x: &[f64]) -> DMatrix<f64> {
        let mut m = self.constant.clone();
        for (k, f) in &self.terms {
            m += f * x[*k];
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    /// `F(x) < 0`
    NegativeDefinite,
    /// `F(x) > 0`
    PositiveDefinite,
}

#[derive(Debug, Clone)]
pub struct Constraint {
    pub name: String,
    pub expr: AffineMatrixExpr,
    pub sense: Sense,
}

/// One additive term inside a block of a block-structured LMI.
#[derive(Debug, Clone)]
pub enum Term {
    Constant(DMatrix<f64>),
    /// `x * coef` for a scalar variable.
    Scaled {
        var: VarId,
        coef: DMatrix<f64>,
    },
    /// `left * X * right`, or `left * X^T * right` when `transposed`.
    Product {
        var: VarId,
        left: DMatrix<f64>,
        right: DMatrix<f64>,
        transposed: bool,
    },
}

impl Term {
    pub fn constant(m: DMatrix<f64>) -> Self {
        Term::Constant(m)
    }
    pub fn scaled(var: VarId, coef: DMatrix<f64>) -> Self {
        Term::Scaled { var, coef }
    }
    pub fn product(left: DMatrix<f64>, var: VarId, right: DMatrix<f64>) -> Self {
        Term::Product {
            var,
            left,
            right,
            transposed: false,
        }
    }
    pub fn product_t(left: DMatrix<f64>, var: VarId, right: DMatrix<f64>) -> Self {
        Term::Product {
            var,
            left,
            right,
            transposed: true,
        }
    }
}

/// Symmetric block matrix specified by its upper-triangular blocks.
#[derive(Debug, Clone)]
pub struct BlockLmi {
    sizes: Vec<usize>,
    blocks: Vec<((usize, usize), Term)>,
}

impl BlockLmi {
    pub fn new(sizes: &[usize]) -> Self {
        BlockLmi {
            sizes: sizes.to_vec(),
            blocks: Vec::new(),
        }
    }

    /// Adds `term` to block `(i, j)`, `i <= j`; the mirrored block gets its
    /// transpose.
    pub fn add(&mut self, i: usize, j: usize, term: Term) -> &mut Self {
        self.blocks.push(((i, j), term));
        self
    }

    /// Adds `term + term^T` to diagonal block `(i, i)`.
    pub fn add_sym(&mut self, i: usize, term: Term) -> &mut Self {
        let mirrored = match &term {
            Term::Constant(m) => Term::Constant(m.transpose()),
            Term::Scaled { var, coef } => Term::Scaled {
                var: *var,
                coef: coef.transpose(),
            },
            Term::Product {
                var,
                left,
                right,
                transposed,
            } => Term::Product {
                var: *var,
                left: right.transpose(),
                right: left.transpose(),
                transposed: !*transposed,
            },
        };
        self.blocks.push(((i, i), term));
        self.blocks.push(((i, i), mirrored));
        self
    }

    pub fn dim(&self) -> usize {
        self.sizes.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Feasible,
    Infeasible,
    MaxIterations,
}

#[derive(Debug, Clone)]
pub struct Assignment {
    vars: Vec<VarDecl>,
    pub values: Vec<f64>,
}

impl Assignment {
    pub fn scalar(&self, v: VarId) -> f64 {
        self.values[self.vars[v.0].offset]
    }

    pub fn matrix(&self, v: VarId) -> DMatrix<f64> {
        let d = &self.vars[v.0];
        let x = &self.values[d.offset..d.offset + d.shape.n_entries()];
        match d.shape {
            VarShape::Scalar => DMatrix::from_element(1, 1, x[0]),
            VarShape::Symmetric(n) => {
                let mut m = DMatrix::zeros(n, n);
                let mut k = 0;
                for a in 0..n {
                    for b in a..n {
                        m[(a, b)] = x[k];
                        m[(b, a)] = x[k];
                        k += 1;
                    }
                }
                m
            }
            VarShape::Full(r, c) => DMatrix::from_column_slice(r, c, x),
        }
    }

    pub fn name(&self, v: VarId) -> &str {
        &self.vars[v.0].name
    }
}

#[derive(Debug, Clone)]
pub struct FeasibilityResult {
    pub status: SolveStatus,
    pub assignment: Assignment,
    /// Largest eigenvalue of `-S_i(x)` over all constraints, where `S_i` is
    /// the constraint oriented so that feasibility means `S_i > 0`. Negative
    /// when every constraint holds strictly.
    pub worst_eigenvalue: f64,
    pub objective: Option<f64>,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct SolverOptions {
    pub max_newton_steps: usize,
    /// Strictness margin; `None` picks `1e-7` times the largest constant
    /// entry (at least `1e-7`).
    pub margin: Option<f64>,
    /// Relative duality-gap target for Phase II.
    pub rel_gap: f64,
    pub barrier_growth: f64,
    /// Decision vectors are confined to a Euclidean ball of this radius,
    /// so infeasibility verdicts hold within that ball.
    pub radius: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_newton_steps: 4000,
            margin: None,
            rel_gap: 1e-6,
            barrier_growth: 8.0,
            radius: 1e5,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct FeasibilityProblem {
    vars: Vec<VarDecl>,
    n_dec: usize,
    constraints: Vec<Constraint>,
    objective: Vec<(usize, f64)>,
}

impl FeasibilityProblem {
    pub fn new() -> Self {
        Self::default()
    }

    fn declare(&mut self, name: &str, shape: VarShape) -> VarId {
        let id = VarId(self.vars.len());
        self.vars.push(VarDecl {
            name: name.to_string(),
            shape,
            offset: self.n_dec,
        });
        self.n_dec += shape.n_entries();
        id
    }

    pub fn scalar(&mut self, name: &str) -> VarId {
        self.declare(name, VarShape::Scalar)
    }

    pub fn symmetric(&mut self, name: &str, n: usize) -> VarId {
        self.declare(name, VarShape::Symmetric(n))
    }

    pub fn full(&mut self, name: &str, rows: usize, cols: usize) -> VarId {
        self.declare(name, VarShape::Full(rows, cols))
    }

    pub fn n_decision(&self) -> usize {
        self.n_dec
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.constraints
    }

    pub fn shape(&self, v: VarId) -> VarShape {
        self.vars[v.0].shape
    }

    /// Objective contribution `weight * x` for a scalar variable.
    pub fn minimize_scalar(&mut self, v: VarId, weight: f64) {
        self.objective.push((self.vars[v.0].offset, weight));
    }

    /// Objective contribution `weight * trace(X)` for a symmetric variable.
    pub fn minimize_trace(&mut self, v: VarId, weight: f64) {
        let d = &self.vars[v.0];
        if let VarShape::Symmetric(n) = d.shape {
            let mut k = d.offset;
            for a in 0..n {
                self.objective.push((k, weight));
                k += n - a;
            }
        }
    }

    pub fn add_block(&mut self, name: &str, lmi: &BlockLmi, sense: Sense) -> Result<(), MatError> {
        let expr = self.compile(lmi)?;
        self.constraints.push(Constraint {
            name: name.to_string(),
            expr,
            sense,
        });
        Ok(())
    }

    /// Single-block convenience wrapper.
    pub fn add_terms(
        &mut self,
        name: &str,
        dim: usize,
        terms: Vec<Term>,
        sense: Sense,
    ) -> Result<(), MatError> {
        let mut lmi = BlockLmi::new(&[dim]);
        for t in terms {
            lmi.add(0, 0, t);
        }
        self.add_block(name, &lmi, sense)
    }

    fn compile(&self, lmi: &BlockLmi) -> Result<AffineMatrixExpr, MatError> {
        let dim = lmi.dim();
        let mut starts = Vec::with_capacity(lmi.sizes.len());
        let mut acc = 0;
        for s in &lmi.sizes {
            starts.push(acc);
            acc += s;
        }
        let mut constant = DMatrix::zeros(dim, dim);
        let mut coef: Vec<Option<DMatrix<f64>>> = vec![None; self.n_dec];

        for ((i, j), term) in &lmi.blocks {
            let (i, j) = (*i, *j);
            if i > j || j >= lmi.sizes.len() {
                return Err(MatError::DimensionMismatch(format!(
                    "block ({i},{j}) invalid"
                )));
            }
            let (ri, cj) = (lmi.sizes[i], lmi.sizes[j]);
            let place = |target: &mut DMatrix<f64>, m: &DMatrix<f64>| {
                let mut v = target.view_mut((starts[i], starts[j]), (ri, cj));
                v += m;
                if i != j {
                    let mut w = target.view_mut((starts[j], starts[i]), (cj, ri));
                    w += m.transpose();
                }
            };
            let check = |m: &DMatrix<f64>| -> Result<(), MatError> {
                if m.shape() != (ri, cj) {
                    Err(MatError::DimensionMismatch(format!(
                        "block ({i},{j}) expects {ri}x{cj}, term gives {}x{}",
                        m.nrows(),
                        m.ncols()
                    )))
                } else {
                    Ok(())
                }
            };
            match term {
                Term::Constant(m) => {
                    check(m)?;
                    place(&mut constant, m);
                }
                Term::Scaled { var, coef: c } => {
                    check(c)?;
                    let d = &self.vars[var.0];
                    if d.shape != VarShape::Scalar {
                        return Err(MatError::DimensionMismatch(format!(
                            "{} is not scalar",
                            d.name
                        )));
                    }
                    let slot = coef[d.offset].get_or_insert_with(|| DMatrix::zeros(dim, dim));
                    place(slot, c);
                }
                Term::Product {
                    var,
                    left,
                    right,
                    transposed,
                } => {
                    let d = &self.vars[var.0];
                    let (vr, vc) = match d.shape {
                        VarShape::Scalar => (1, 1),
                        VarShape::Symmetric(n) => (n, n),
                        VarShape::Full(r, c) => {
                            if *transposed {
                                (c, r)
                            } else {
                                (r, c)
                            }
                        }
                    };
                    if left.ncols() != vr
                        || right.nrows() != vc
                        || left.nrows() != ri
                        || right.ncols() != cj
                    {
                        return Err(MatError::DimensionMismatch(format!(
                            "block ({i},{j}): {}x{} * {} ({vr}x{vc}) * {}x{}",
                            left.nrows(),
                            left.ncols(),
                            d.name,
                            right.nrows(),
                            right.ncols()
                        )));
                    }
                    let mut k = d.offset;
                    let mut emit = |k: usize, m: DMatrix<f64>| {
                        let slot = coef[k].get_or_insert_with(|| DMatrix::zeros(dim, dim));
                        place(slot, &m);
                    };
                    match d.shape {
                        VarShape::Scalar => emit(k, left * right),
                        VarShape::Symmetric(n) => {
                            for a in 0..n {
                                for b in a..n {
                                    let mut m = left.column(a) * right.row(b);
                                    if a != b {
                                        m += left.column(b) * right.row(a);
                                    }
                                    emit(k, m);
                                    k += 1;
                                }
                            }
                        }
                        VarShape::Full(r, c) => {
                            // Column-major entry (a, b) of X.
                            for b in 0..c {
                                for a in 0..r {
                                    let m = if *transposed {
                                        left.column(b) * right.row(a)
                                    } else {
                                        left.column(a) * right.row(b)
                                    };
                                    emit(k, m);
                                    k += 1;
                                }
                            }
                        }
                    }
                }
            }
        }

        if !is_symmetric(&constant, 1e-12) {
            return Err(MatError::AsymmetricConstraint);
        }
        let mut terms = Vec::new();
        for (k, c) in coef.into_iter().enumerate() {
            if let Some(c) = c {
                if !is_symmetric(&c, 1e-12) {
                    return Err(MatError::AsymmetricConstraint);
                }
                if c.amax() > 0.0 {
                    terms.push((k, symmetrize(&c)));
                }
            }
        }
        Ok(AffineMatrixExpr {
            constant: symmetrize(&constant),
            terms,
        })
    }

    /// Largest constant-term entry, at least 1. Coefficient matrices are
    /// excluded because their size says nothing about the size of the
    /// decision variables.
    fn data_scale(&self) -> f64 {
        self.constraints
            .iter()
            .map(|c| c.expr.constant.amax())
            .fold(1.0, f64::max)
    }

    /// Oriented constraints `S_i(x) = ±F_i(x)`, feasible when `S_i > 0`.
    fn oriented(&self) -> Vec<SymAffine> {
        self.constraints
            .iter()
            .map(|c| {
                let sign = match c.sense {
                    Sense::NegativeDefinite => -1.0,
                    Sense::PositiveDefinite => 1.0,
                };
                SymAffine {
                    constant: &c.expr.constant * sign,
                    terms: c.expr.terms.iter().map(|(k, f)| (*k, f * sign)).collect(),
                }
            })
            .collect()
    }

    /// Smallest eigenvalue of `S_i(x)` over all constraints.
    pub fn min_slack(&self, x: &[f64]) -> f64 {
        self.oriented()
            .iter()
            .map(|s| min_sym_eigenvalue(&s.evaluate(x)))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn margin(&self, opts: &SolverOptions) -> f64 {
        opts.margin.unwrap_or(1e-7 * self.data_scale())
    }

    /// Feasibility only (any registered objective is ignored).
    pub fn solve_feasibility(&self, opts: &SolverOptions) -> FeasibilityResult {
        self.run(opts, false)
    }

    /// Feasibility followed by minimisation of the registered objective.
    pub fn solve_minimize(&self, opts: &SolverOptions) -> FeasibilityResult {
        self.run(opts, true)
    }

    fn run(&self, opts: &SolverOptions, with_objective: bool) -> FeasibilityResult {
        let margin = self.margin(opts);
        let base = self.oriented();
        let m = self.n_dec;
        let total_dim: usize = base.iter().map(|s| s.dim()).sum();
        let ball = Ball {
            radius: opts.radius,
            count: m,
        };

        // Phase I: variables (x, s), constraints S_i(x) - s I > 0.
        let phase1: Vec<SymAffine> = base
            .iter()
            .map(|s| {
                let mut t = s.clone();
                t.terms.push((m, -DMatrix::identity(s.dim(), s.dim())));
                t
            })
            .collect();
        let x0 = vec![0.0; m];
        let s0 = base
            .iter()
            .map(|s| min_sym_eigenvalue(&s.evaluate(&x0)))
            .fold(f64::INFINITY, f64::min)
            - 1.0;
        let mut z = x0;
        z.push(s0);
        let mut c1 = vec![0.0; m + 1];
        c1[m] = -1.0;

        let mut steps = 0;
        let outcome = barrier_minimize(
            &phase1,
            &c1,
            z,
            ball,
            opts.barrier_growth,
            opts.max_newton_steps,
            |z, gap, centered| {
                let s = z[m];
                if s >= margin {
                    Stop::Done
                } else if (centered && s + gap < margin)
                    || (gap.is_finite()
                        && slack_upper_bound(&phase1, z, opts.radius)
                            .is_some_and(|ub| ub < margin))
                {
                    Stop::Fail
                } else {
                    Stop::Continue
                }
            },
            total_dim,
            true,
        );
        steps += outcome.steps;
        let mut z = outcome.z;
        let s_final = z[m];
        z.truncate(m);

        let mut status = match outcome.stop {
            Stop::Done => SolveStatus::Feasible,
            Stop::Fail => SolveStatus::Infeasible,
            Stop::Continue => {
                if s_final >= margin {
                    SolveStatus::Feasible
                } else {
                    SolveStatus::MaxIterations
                }
            }
        };

        let mut objective = None;
        if status == SolveStatus::Feasible && with_objective && !self.objective.is_empty() {
            let mut c = vec![0.0; m];
            for (k, w) in &self.objective {
                c[*k] += w;
            }
            let shifted: Vec<SymAffine> = base
                .iter()
                .map(|s| {
                    let mut t = s.clone();
                    let d = t.dim();
                    t.constant -= DMatrix::identity(d, d) * margin;
                    t
                })
                .collect();
            let rel = opts.rel_gap;
            let remaining = opts.max_newton_steps.saturating_sub(steps).max(200);
            let cc = c.clone();
            let out2 = barrier_minimize(
                &shifted,
                &c,
                z.clone(),
                ball,
                opts.barrier_growth,
                remaining,
                |z, gap, centered| {
                    let f: f64 = z.iter().zip(&cc).map(|(a, b)| a * b).sum();
                    if centered && gap <= rel * f.abs().max(1e-8) {
                        Stop::Done
                    } else {
                        Stop::Continue
                    }
                },
                total_dim,
                true,
            );
            steps += out2.steps;
            z = out2.z;
            objective = Some(z.iter().zip(&c).map(|(a, b)| a * b).sum());
        }

        let slack = base
            .iter()
            .map(|s| min_sym_eigenvalue(&s.evaluate(&z)))
            .fold(f64::INFINITY, f64::min);
        if status == SolveStatus::Feasible && slack <= 0.0 {
            status = SolveStatus::MaxIterations;
        }
        FeasibilityResult {
            status,
            assignment: Assignment {
                vars: self.vars.clone(),
                values: z,
            },
            worst_eigenvalue: -slack,
            objective,
            iterations: steps,
        }
    }
}

#[derive(Debug, Clone)]
struct SymAffine {
    constant: DMatrix<f64>,
    terms: Vec<(usize, DMatrix<f64>)>,
}

impl SymAffine {
    fn dim(&self) -> usize {
        self.constant.nrows()
    }
    fn evaluate(&self, z: &[f64]) -> DMatrix<f64> {
        let mut m = self.constant.clone();
        for (k, f) in &self.terms {
            m += f * z[*k];
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stop {
    Continue,
    Done,
    Fail,
}

struct BarrierOutcome {
    z: Vec<f64>,
    stop: Stop,
    steps: usize,
}

fn chol_all(cons: &[SymAffine], z: &[f64]) -> Option<Vec<Cholesky<f64, nalgebra::Dyn>>> {
    cons.iter()
        .map(|c| Cholesky::new(symmetrize(&c.evaluate(z))))
        .collect()
}

const CENTERING_STEPS: usize = 150;

/// `-log(R^2 - |z[..count]|^2)` keeps iterates inside a ball of radius `R`.
#[derive(Debug, Clone, Copy)]
struct Ball {
    radius: f64,
    count: usize,
}

impl Ball {
    fn slack(&self, z: &[f64]) -> f64 {
        self.radius * self.radius - z[..self.count].iter().map(|v| v * v).sum::<f64>()
    }
}

fn barrier_value(chols: &[Cholesky<f64, nalgebra::Dyn>], ball: Ball, z: &[f64]) -> f64 {
    let lmi: f64 = chols
        .iter()
        .map(|ch| -2.0 * ch.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
        .sum();
    lmi - ball.slack(z).ln()
}

/// Upper bound on the common slack `s` over the ball, read off the dual
/// matrices `Z_i = S_i(z)^{-1}` of the Phase I constraints at `z`:
/// `s <= (sum <Z_i, F_i0> + R |r|) / sum tr Z_i` with `r_k = sum <Z_i, F_ik>`.
fn slack_upper_bound(phase1: &[SymAffine], z: &[f64], radius: f64) -> Option<f64> {
    let m = z.len() - 1;
    let mut r = vec![0.0; m];
    let mut constant = 0.0;
    let mut trace = 0.0;
    for con in phase1 {
        let zi = con.evaluate(z).cholesky()?.inverse();
        constant += zi.dot(&con.constant);
        trace += zi.trace();
        for (k, f) in &con.terms {
            if *k < m {
                r[*k] += zi.dot(f);
            }
        }
    }
    let rn = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    (trace > 0.0).then(|| (constant + radius * rn) / trace)
}

fn objective_value(c: &[f64], z: &[f64]) -> f64 {
    c.iter().zip(z).map(|(a, b)| a * b).sum()
}

/// Minimises `kappa c^T z - sum_i log det S_i(z) - log(R^2 - |x|^2)` along
/// the central path, consulting `stop` after each centering.
#[allow(clippy::too_many_arguments)]
fn barrier_minimize(
    cons: &[SymAffine],
    c: &[f64],
    mut z: Vec<f64>,
    ball: Ball,
    growth: f64,
    max_steps: usize,
    mut stop: impl FnMut(&[f64], f64, bool) -> Stop,
    total_dim: usize,
    balanced_start: bool,
) -> BarrierOutcome {
    let cvec = DVector::from_column_slice(c);
    let mut steps = 0;
    let mut kappa = f64::NAN;
    let unfinished = |z: Vec<f64>, steps| BarrierOutcome {
        z,
        stop: Stop::Continue,
        steps,
    };

    loop {
        let budget = (steps + CENTERING_STEPS).min(max_steps);
        let mut centered = false;
        while steps < budget {
            let Some(chols) = chol_all(cons, &z) else {
                return unfinished(z, steps);
            };
            let (g_bar, jac) = full_derivatives(cons, &chols, ball, &z);
            if kappa.is_nan() {
                kappa = if balanced_start {
                    initial_weight(&jac, &g_bar, &cvec, total_dim)
                } else {
                    (g_bar.norm() / cvec.norm().max(1e-300)).clamp(1e-6, 1e6)
                };
            }
            let grad = &cvec * kappa + &g_bar;
            let Some(dir) = newton_direction(&jac, &grad) else {
                break;
            };
            let decrement = -grad.dot(&dir);
            steps += 1;
            if !decrement.is_finite() || decrement < 1e-10 {
                centered = decrement.is_finite();
                break;
            }
            let f0 = kappa * objective_value(c, &z) + barrier_value(&chols, ball, &z);
            let mut accepted = false;
            let mut alpha = 1.0;
            for _ in 0..60 {
                let trial: Vec<f64> = z
                    .iter()
                    .zip(dir.iter())
                    .map(|(a, d)| a + alpha * d)
                    .collect();
                if ball.slack(&trial) > 0.0 {
                    if let Some(ch) = chol_all(cons, &trial) {
                        let f1 =
                            kappa * objective_value(c, &trial) + barrier_value(&ch, ball, &trial);
                        if f1 <= f0 - 0.25 * alpha * decrement {
                            z = trial;
                            accepted = true;
                            break;
                        }
                    }
                }
                alpha *= 0.5;
            }
            if !accepted || decrement < 1e-6 {
                centered = accepted;
                break;
            }
            // Steps this short only reflect rounding in the barrier value.
            if alpha < 1e-10 {
                break;
            }
            if stop(&z, f64::INFINITY, false) == Stop::Done {
                return BarrierOutcome {
                    z,
                    stop: Stop::Done,
                    steps,
                };
            }
        }
        // The ball term contributes one more unit to the barrier degree.
        let degree = (total_dim + 1) as f64;
        let mut gap = degree / kappa;
        if !centered {
            if let Some(dec) = newton_decrement(cons, c, &z, ball, kappa) {
                if dec <= 0.5 {
                    let lam = dec.sqrt();
                    centered = true;
                    gap = (degree + degree.sqrt() * lam / (1.0 - lam)) / kappa;
                }
            }
        }
        let verdict = stop(&z, gap, centered);
        if verdict != Stop::Continue {
            return BarrierOutcome {
                z,
                stop: verdict,
                steps,
            };
        }
        if steps >= max_steps || !kappa.is_finite() {
            return unfinished(z, steps);
        }
        kappa *= growth;
        if kappa > 1e20 {
            return unfinished(z, steps);
        }
    }
}

/// Barrier gradient and Jacobian including the ball term.
fn full_derivatives(
    cons: &[SymAffine],
    chols: &[Cholesky<f64, nalgebra::Dyn>],
    ball: Ball,
    z: &[f64],
) -> (DVector<f64>, DMatrix<f64>) {
    let (mut g, jac) = barrier_derivatives(cons, chols, z.len());
    if ball.count == 0 {
        return (g, jac);
    }
    let bs = ball.slack(z);
    let rows = jac.nrows();
    let mut full = jac.resize_vertically(rows + ball.count + 1, 0.0);
    let diag = (2.0 / bs).sqrt();
    for i in 0..ball.count {
        g[i] += 2.0 * z[i] / bs;
        full[(rows + i, i)] = diag;
        full[(rows + ball.count, i)] = 2.0 * z[i] / bs;
    }
    (g, full)
}

/// Squared Newton decrement of the weighted barrier at `z`.
fn newton_decrement(
    cons: &[SymAffine],
    c: &[f64],
    z: &[f64],
    ball: Ball,
    kappa: f64,
) -> Option<f64> {
    let chols = chol_all(cons, z)?;
    let (g, jac) = full_derivatives(cons, &chols, ball, z);
    let grad = DVector::from_column_slice(c) * kappa + g;
    let dir = newton_direction(&jac, &grad)?;
    Some(-grad.dot(&dir))
}

/// Barrier weight that best balances objective and barrier gradients in
/// the Newton metric: minimises `|kappa c + g|` in the `H^{-1}` norm.
fn initial_weight(jac: &DMatrix<f64>, g: &DVector<f64>, c: &DVector<f64>, total_dim: usize) -> f64 {
    let fallback = 1.0;
    let (Some(hc), Some(hg)) = (newton_direction(jac, c), newton_direction(jac, g)) else {
        return fallback;
    };
    // newton_direction returns -H^{-1} v.
    let chc = -c.dot(&hc);
    let chg = -c.dot(&hg);
    if !(chc > 0.0) {
        return fallback;
    }
    let k = -chg / chc;
    if k.is_finite() && k > 0.0 {
        k.clamp(1e-8, 1e8)
    } else {
        // Objective and barrier already pull the same way; scale so the
        // duality-gap bound matches the barrier degree.
        (total_dim as f64 / chc.sqrt().max(1e-12)).clamp(1e-8, 1e8)
    }
}

/// Barrier gradient and a Jacobian `J` with Hessian `J^T J`. Row blocks of
/// `J` hold the half-vectorised `L^{-1} S_k L^{-T}` for each constraint.
fn barrier_derivatives(
    cons: &[SymAffine],
    chols: &[Cholesky<f64, nalgebra::Dyn>],
    n: usize,
) -> (DVector<f64>, DMatrix<f64>) {
    let rows: usize = cons.iter().map(|c| c.dim() * (c.dim() + 1) / 2).sum();
    let mut g = DVector::zeros(n);
    let mut jac = DMatrix::zeros(rows, n);
    let mut offset = 0;
    for (con, ch) in cons.iter().zip(chols) {
        let l = ch.l();
        let d = con.dim();
        for (k, f) in &con.terms {
            let a = l
                .solve_lower_triangular(f)
                .expect("cholesky factor is nonsingular");
            let w = l
                .solve_lower_triangular(&a.transpose())
                .expect("cholesky factor is nonsingular");
            let mut r = offset;
            for j in 0..d {
                g[*k] -= w[(j, j)];
                jac[(r, *k)] += w[(j, j)];
                r += 1;
                for i in j + 1..d {
                    jac[(r, *k)] += std::f64::consts::SQRT_2 * 0.5 * (w[(i, j)] + w[(j, i)]);
                    r += 1;
                }
            }
        }
        offset += d * (d + 1) / 2;
    }
    (g, jac)
}

/// Solves `J^T J d = -g` through a QR factorisation of the column-scaled
/// Jacobian, with a small ridge when `J` is rank deficient.
fn newton_direction(jac: &DMatrix<f64>, g: &DVector<f64>) -> Option<DVector<f64>> {
    let n = g.len();
    let scale: DVector<f64> = DVector::from_fn(n, |i, _| {
        let c = jac.column(i).norm();
        if c > 0.0 {
            1.0 / c
        } else {
            1.0
        }
    });
    let gs = g.component_mul(&scale);
    let rows = jac.nrows();
    for ridge in [1e-14, 1e-11, 1e-8, 1e-6] {
        let mut js = DMatrix::zeros(rows + n, n);
        for j in 0..n {
            for i in 0..rows {
                js[(i, j)] = jac[(i, j)] * scale[j];
            }
            js[(rows + j, j)] = ridge;
        }
        let r = js.clone().qr().r();
        let Some(u) = r.tr_solve_upper_triangular(&(-&gs)) else {
            continue;
        };
        let Some(y) = r.solve_upper_triangular(&u) else {
            continue;
        };
        // One step of iterative refinement on the normal equations.
        let resid = -&gs - js.tr_mul(&(&js * &y));
        let mut y = y;
        if let Some(u) = r.tr_solve_upper_triangular(&resid) {
            if let Some(dy) = r.solve_upper_triangular(&u) {
                y += dy;
            }
        }
        let d = y.component_mul(&scale);
        if d.iter().all(|v| v.is_finite()) {
            return Some(d);
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matops::dense::{kron, max_sym_eigenvalue, spd_inverse};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lyapunov_problem(a: &DMatrix<f64>) -> (FeasibilityProblem, VarId) {
        let n = a.nrows();
        let mut p = FeasibilityProblem::new();
        let x = p.symmetric("P", n);
        let mut lmi = BlockLmi::new(&[n]);
        lmi.add_sym(0, Term::product(a.transpose(), x, DMatrix::identity(n, n)));
        p.add_block("lyap", &lmi, Sense::NegativeDefinite).unwrap();
        p.add_terms(
            "pos",
            n,
            vec![Term::product(
                DMatrix::identity(n, n),
                x,
                DMatrix::identity(n, n),
            )],
            Sense::PositiveDefinite,
        )
        .unwrap();
        (p, x)
    }

    #[test]
    fn scalar_interval() {
        // 1 < x < 3, minimise x.
        let mut p = FeasibilityProblem::new();
        let x = p.scalar("x");
        let one = DMatrix::identity(1, 1);
        p.add_terms(
            "lo",
            1,
            vec![Term::scaled(x, one.clone()), Term::constant(-&one)],
            Sense::PositiveDefinite,
        )
        .unwrap();
        p.add_terms(
            "hi",
            1,
            vec![Term::scaled(x, one.clone()), Term::constant(-&one * 3.0)],
            Sense::NegativeDefinite,
        )
        .unwrap();
        p.minimize_scalar(x, 1.0);
        let r = p.solve_minimize(&SolverOptions::default());
        assert_eq!(r.status, SolveStatus::Feasible);
        assert_abs_diff_eq!(r.assignment.scalar(x), 1.0, epsilon = 1e-5);

        let mut q = FeasibilityProblem::new();
        let y = q.scalar("y");
        q.add_terms(
            "lo",
            1,
            vec![Term::scaled(y, one.clone()), Term::constant(-&one * 3.0)],
            Sense::PositiveDefinite,
        )
        .unwrap();
        q.add_terms(
            "hi",
            1,
            vec![Term::scaled(y, one.clone()), Term::constant(-&one)],
            Sense::NegativeDefinite,
        )
        .unwrap();
        assert_eq!(
            q.solve_feasibility(&SolverOptions::default()).status,
            SolveStatus::Infeasible
        );
    }

    #[test]
    fn block_assembly_matches_direct_evaluation() {
        let mut p = FeasibilityProblem::new();
        let x = p.symmetric("X", 2);
        let y = p.full("Y", 2, 1);
        let r = p.scalar("r");
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -0.5, 0.3]);
        let c = DMatrix::from_row_slice(1, 2, &[0.7, -1.1]);
        let mut lmi = BlockLmi::new(&[2, 1]);
        lmi.add_sym(0, Term::product(a.transpose(), x, DMatrix::identity(2, 2)));
        lmi.add_sym(0, Term::product(DMatrix::identity(2, 2), y, c.clone()));
        lmi.add(0, 0, Term::scaled(r, DMatrix::identity(2, 2)));
        lmi.add(
            0,
            1,
            Term::product(DMatrix::identity(2, 2), y, DMatrix::identity(1, 1)),
        );
        lmi.add(1, 1, Term::constant(DMatrix::from_element(1, 1, -2.0)));
        p.add_block("t", &lmi, Sense::NegativeDefinite).unwrap();

        let vals = [0.3, -0.2, 0.9, 1.5, -0.4, 0.25];
        let got = p.constraints()[0].expr.evaluate(&vals);
        let xm = DMatrix::from_row_slice(2, 2, &[0.3, -0.2, -0.2, 0.9]);
        let ym = DMatrix::from_column_slice(2, 1, &[1.5, -0.4]);
        let tl = a.transpose() * &xm
            + &xm * &a
            + &ym * &c
            + c.transpose() * ym.transpose()
            + DMatrix::identity(2, 2) * 0.25;
        let mut want = DMatrix::zeros(3, 3);
        want.view_mut((0, 0), (2, 2)).copy_from(&tl);
        want.view_mut((0, 2), (2, 1)).copy_from(&ym);
        want.view_mut((2, 0), (1, 2)).copy_from(&ym.transpose());
        want[(2, 2)] = -2.0;
        assert!((got - want).amax() < 1e-14);
    }

    #[test]
    fn dimension_errors_are_reported() {
        let mut p = FeasibilityProblem::new();
        let x = p.symmetric("X", 2);
        let err = p.add_terms(
            "bad",
            3,
            vec![Term::product(
                DMatrix::identity(3, 3),
                x,
                DMatrix::identity(3, 3),
            )],
            Sense::PositiveDefinite,
        );
        assert!(matches!(err, Err(MatError::DimensionMismatch(_))));
    }

    // Oracle: for Hurwitz A the vectorised Lyapunov solve of
    // A^T P + P A = -I yields a positive-definite P.
    fn lyapunov_oracle(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
        let n = a.nrows();
        let id = DMatrix::identity(n, n);
        let sys = kron(&id, &a.transpose()) + kron(&a.transpose(), &id);
        let rhs = -DVector::from_column_slice(id.as_slice());
        let v = sys.lu().solve(&rhs)?;
        let p = DMatrix::from_column_slice(n, n, v.as_slice());
        spd_inverse(&p).ok().map(|_| p)
    }

    #[test]
    fn lyapunov_agrees_with_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..40 {
            let n = 2 + trial % 11;
            let g = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            let ab = crate::matops::dense::spectral_abscissa(&g);
            let hurwitz = trial % 2 == 0;
            let shift = if hurwitz {
                ab + 0.1 + rng.random::<f64>()
            } else {
                ab - 0.05 - rng.random::<f64>()
            };
            let a = g - DMatrix::identity(n, n) * shift;
            let oracle = lyapunov_oracle(&a).is_some();
            assert_eq!(oracle, hurwitz, "oracle disagreement at trial {trial}");
            let (prob, pv) = lyapunov_problem(&a);
            let r = prob.solve_feasibility(&SolverOptions::default());
            if hurwitz {
                assert_eq!(r.status, SolveStatus::Feasible, "trial {trial}");
                let pm = r.assignment.matrix(pv);
                assert!(max_sym_eigenvalue(&(a.transpose() * &pm + &pm * &a)) < 0.0);
            } else {
                assert_eq!(
                    r.status,
                    SolveStatus::Infeasible,
                    "trial {trial} {} {}",
                    r.iterations,
                    r.worst_eigenvalue
                );
            }
        }
    }

    #[test]
    fn minimize_trace_lower_bound() {
        // P > I, minimise trace(P): optimum is I.
        let mut p = FeasibilityProblem::new();
        let x = p.symmetric("P", 3);
        let id = DMatrix::identity(3, 3);
        p.add_terms(
            "lb",
            3,
            vec![
                Term::product(id.clone(), x, id.clone()),
                Term::constant(-&id),
            ],
            Sense::PositiveDefinite,
        )
        .unwrap();
        p.minimize_trace(x, 1.0);
        let r = p.solve_minimize(&SolverOptions::default());
        assert_eq!(r.status, SolveStatus::Feasible);
        assert!((r.assignment.matrix(x) - id).amax() < 1e-4);
        assert!(r.worst_eigenvalue < 0.0);
    }

    #[test]
    fn barrier_derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut p = FeasibilityProblem::new();
        let x = p.symmetric("X", 3);
        let y = p.full("Y", 3, 2);
        let r = p.scalar("r");
        let a = DMatrix::from_fn(3, 3, |_, _| rng.random::<f64>() - 0.5);
        let c = DMatrix::from_fn(2, 3, |_, _| rng.random::<f64>() - 0.5);
        let mut lmi = BlockLmi::new(&[3, 2]);
        lmi.add_sym(0, Term::product(a.transpose(), x, DMatrix::identity(3, 3)));
        lmi.add_sym(0, Term::product(DMatrix::identity(3, 3), y, c.clone()));
        lmi.add(0, 0, Term::scaled(r, DMatrix::identity(3, 3) * 0.3));
        lmi.add(
            0,
            1,
            Term::product(DMatrix::identity(3, 3), y, DMatrix::identity(2, 2) * 0.2),
        );
        lmi.add(1, 1, Term::constant(DMatrix::identity(2, 2) * 5.0));
        lmi.add(0, 0, Term::constant(DMatrix::identity(3, 3) * 5.0));
        p.add_block("t", &lmi, Sense::PositiveDefinite).unwrap();
        let cons = p.oriented();
        let n = p.n_decision();
        let z: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() - 0.5) * 0.2).collect();
        let f = |z: &[f64]| {
            let ch = chol_all(&cons, z).unwrap();
            barrier_value(
                &ch,
                Ball {
                    radius: 1e3,
                    count: 0,
                },
                z,
            )
        };
        let ch = chol_all(&cons, &z).unwrap();
        let (g, jac) = barrier_derivatives(&cons, &ch, n);
        let h = jac.transpose() * &jac;
        let eps = 1e-5;
        for i in 0..n {
            let mut zp = z.clone();
            zp[i] += eps;
            let mut zm = z.clone();
            zm[i] -= eps;
            let fd = (f(&zp) - f(&zm)) / (2.0 * eps);
            assert!(
                (fd - g[i]).abs() < 1e-6 * (1.0 + g[i].abs()),
                "grad {i}: {fd} vs {}",
                g[i]
            );
            let chp = chol_all(&cons, &zp).unwrap();
            let chm = chol_all(&cons, &zm).unwrap();
            let gp = barrier_derivatives(&cons, &chp, n).0;
            let gm = barrier_derivatives(&cons, &chm, n).0;
            for j in 0..n {
                let fd = (gp[j] - gm[j]) / (2.0 * eps);
                assert!(
                    (fd - h[(i, j)]).abs() < 1e-5 * (1.0 + h[(i, j)].abs()),
                    "hess {i},{j}: {fd} vs {}",
                    h[(i, j)]
                );
            }
        }
    }
}
