//! Dense linear algebra helpers and an LMI solver.

pub mod dense;
pub mod lmi;

use thiserror::Error;

pub use dense::{
    companion, eigenvalues, is_hurwitz, is_positive_definite, max_sym_eigenvalue,
    min_sym_eigenvalue, poly_from_roots, spd_inverse, spectral_abscissa, sylvester_residual,
    sylvester_solve, symmetrize, young_bound_holds,
};
pub use lmi::{
    AffineMatrixExpr, Assignment, BlockLmi, FeasibilityProblem, FeasibilityResult, Sense,
    SolveStatus, SolverOptions, Term, VarId, VarShape,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix is not symmetric")]
    NotSymmetric,
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("spectra overlap (separation {separation:.3e})")]
    SharedEigenvalues { separation: f64 },
    #[error("linear system is singular")]
    SingularSystem,
    #[error("assembled constraint is not symmetric")]
    AsymmetricConstraint,
    #[error("complex roots must appear in conjugate pairs")]
    NonConjugateRoots,
}
