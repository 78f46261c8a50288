use nalgebra::{Cholesky, Complex, DMatrix, DVector, SymmetricEigen};

use super::MatError;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigenvalues of the symmetric part of `m`, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .copied()
        .collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

pub fn max_sym_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m)
        .last()
        .copied()
        .unwrap_or(f64::NEG_INFINITY)
}

pub fn min_sym_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m).first().copied().unwrap_or(f64::INFINITY)
}

pub fn is_symmetric(m: &DMatrix<f64>, rel_tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    (m - m.transpose()).amax() <= rel_tol * scale
}

/// True iff a Cholesky factorisation of `m` succeeds.
pub fn is_positive_definite(m: &DMatrix<f64>) -> Result<bool, MatError> {
    if !is_symmetric(m, 1e-10) {
        return Err(MatError::NotSymmetric);
    }
    Ok(Cholesky::new(symmetrize(m)).is_some())
}

/// Inverse of a symmetric positive-definite matrix via Cholesky.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>, MatError> {
    let chol = Cholesky::new(symmetrize(m)).ok_or(MatError::NotPositiveDefinite)?;
    Ok(symmetrize(&chol.inverse()))
}

/// Checks `2 p^T q <= p^T Phi p + q^T Phi^{-1} q` for positive-definite
/// `Phi`. The comparison allows a few ulps of round-off in the right-hand
/// side.
pub fn young_bound_holds(
    p: &DVector<f64>,
    q: &DVector<f64>,
    phi: &DMatrix<f64>,
) -> Result<bool, MatError> {
    let n = p.len();
    if q.len() != n || phi.shape() != (n, n) {
        return Err(MatError::DimensionMismatch(format!(
            "p has {}, q has {}, phi is {}x{}",
            n,
            q.len(),
            phi.nrows(),
            phi.ncols()
        )));
    }
    let chol = Cholesky::new(symmetrize(phi)).ok_or(MatError::NotPositiveDefinite)?;
    let lhs = 2.0 * p.dot(q);
    let quad_p = p.dot(&(phi * p));
    let quad_q = q.dot(&chol.solve(q));
    let rhs = quad_p + quad_q;
    Ok(lhs <= rhs + 8.0 * f64::EPSILON * (lhs.abs() + rhs.abs()))
}

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Complex eigenvalues of a general real square matrix.
pub fn eigenvalues(m: &DMatrix<f64>) -> Vec<Complex<f64>> {
    m.complex_eigenvalues().iter().copied().collect()
}

pub fn spectral_abscissa(m: &DMatrix<f64>) -> f64 {
    eigenvalues(m)
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn is_hurwitz(m: &DMatrix<f64>) -> bool {
    spectral_abscissa(m) < 0.0
}

/// Smallest pairwise distance between the spectra of `a` and `f`.
pub fn spectral_separation(a: &DMatrix<f64>, f: &DMatrix<f64>) -> f64 {
    let ea = eigenvalues(a);
    let ef = eigenvalues(f);
    let mut best = f64::INFINITY;
    for x in &ea {
        for y in &ef {
            best = best.min((x - y).norm());
        }
    }
    best
}

/// Solves `T A - F T = rhs` for `T` through the Kronecker-vectorised
/// system `(A^T (x) I_k - I_n (x) F) vec(T) = vec(rhs)`.
pub fn sylvester_solve(
    a: &DMatrix<f64>,
    f: &DMatrix<f64>,
    rhs: &DMatrix<f64>,
) -> Result<DMatrix<f64>, MatError> {
    let n = a.nrows();
    let k = f.nrows();
    if !a.is_square() || !f.is_square() || rhs.shape() != (k, n) {
        return Err(MatError::DimensionMismatch(format!(
            "a {}x{}, f {}x{}, rhs {}x{}",
            a.nrows(),
            a.ncols(),
            f.nrows(),
            f.ncols(),
            rhs.nrows(),
            rhs.ncols()
        )));
    }
    let scale = a.amax().max(f.amax()).max(1.0);
    let sep = spectral_separation(a, f);
    if sep <= 1e-8 * scale {
        return Err(MatError::SharedEigenvalues { separation: sep });
    }
    let system = kron(&a.transpose(), &DMatrix::identity(k, k)) - kron(&DMatrix::identity(n, n), f);
    let b = DVector::from_column_slice(rhs.as_slice());
    let x = system.lu().solve(&b).ok_or(MatError::SingularSystem)?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(MatError::SingularSystem);
    }
    Ok(DMatrix::from_column_slice(k, n, x.as_slice()))
}

/// Relative residual `||T A - F T - rhs||_F / (||T||_F ||A||_F + ||rhs||_F)`.
pub fn sylvester_residual(
    t: &DMatrix<f64>,
    a: &DMatrix<f64>,
    f: &DMatrix<f64>,
    rhs: &DMatrix<f64>,
) -> f64 {
    let r = t * a - f * t - rhs;
    let denom = t.norm() * a.norm() + rhs.norm();
    if denom == 0.0 {
        r.norm()
    } else {
        r.norm() / denom
    }
}

/// Monic characteristic polynomial coefficients `[c_0, ..., c_{k-1}]` of
/// the given roots (`s^k + c_{k-1} s^{k-1} + ... + c_0`). Complex roots
/// must come in conjugate pairs.
pub fn poly_from_roots(roots: &[Complex<f64>]) -> Result<Vec<f64>, MatError> {
    let mut coeffs = vec![Complex::new(1.0, 0.0)];
    for r in roots {
        let mut next = vec![Complex::new(0.0, 0.0); coeffs.len() + 1];
        for (i, c) in coeffs.iter().enumerate() {
            next[i + 1] += c;
            next[i] -= c * r;
        }
        coeffs = next;
    }
    let scale = coeffs.iter().map(|c| c.norm()).fold(1.0, f64::max);
    if coeffs.iter().any(|c| c.im.abs() > 1e-9 * scale) {
        return Err(MatError::NonConjugateRoots);
    }
    coeffs.pop();
    Ok(coeffs.into_iter().map(|c| c.re).collect())
}

/// Companion matrix with ones on the superdiagonal and last row
/// `[-c_0, ..., -c_{k-1}]`.
pub fn companion(coeffs: &[f64]) -> DMatrix<f64> {
    let k = coeffs.len();
    let mut m = DMatrix::zeros(k, k);
    for i in 0..k.saturating_sub(1) {
        m[(i, i + 1)] = 1.0;
    }
    for (j, c) in coeffs.iter().enumerate() {
        m[(k - 1, j)] = -c;
    }
    m
}

pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = singular_values(m);
    match (sv.first(), sv.last()) {
        (Some(&hi), Some(&lo)) if lo > 0.0 => hi / lo,
        _ => f64::INFINITY,
    }
}

/// Numerical rank of a complex matrix with threshold `rel_tol * sigma_max`.
pub fn complex_rank(m: &DMatrix<Complex<f64>>, rel_tol: f64) -> usize {
    let sv = m.clone().singular_values();
    let top = sv.iter().copied().fold(0.0, f64::max);
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * top).count()
}
