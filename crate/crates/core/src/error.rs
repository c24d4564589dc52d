use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("matrix is singular (|det| = {det:e})")]
    Singular { det: f64 },

    #[error("ODE state became non-finite at t = {t}")]
    NonFinite { t: f64 },

    #[error("fixed-point iteration did not converge: residual {residual:e} after {iterations} iterations")]
    NoConvergence { residual: f64, iterations: usize },

    #[error("precondition violated: {0}")]
    PreconditionViolated(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    /// The linearised solution degenerated: `|det|` collapsed relative to its running maximum.
    #[error("conjugate point near t = {t}: det = {det:e}")]
    ConjugatePoint { t: f64, det: f64 },

    #[error("det A(0) = {0} is not positive")]
    NegativeDeterminant(f64),

    #[error("covariance matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("parameter out of range: {0}")]
    ParameterOutOfRange(String),

    #[error("admissibility check failed: {0}")]
    AdmissibilityStrictFail(String),

    #[error("Monte Carlo check failed: {0}")]
    VerificationFailed(String),

    #[error("invalid problem specification: {0}")]
    Spec(String),
}

pub type Result<T> = std::result::Result<T, Error>;
