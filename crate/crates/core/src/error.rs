//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not square: {0}x{1}")]
    NotSquare(usize, usize),

    #[error("dimension {dim} does not match site range of {sites} sites with local dim {d}")]
    DimensionMismatch { dim: usize, sites: usize, d: usize },

    #[error("site ranges do not match: {0} vs {1}")]
    RangeMismatch(String, String),

    #[error("range {0} is not contained in {1}")]
    NotSubRange(String, String),

    #[error("doubled coordinate {nu} and diameter {l} have different parity")]
    BadParity { nu: i64, l: i64 },

    #[error("not Hermitian (defect {0:.3e})")]
    NotHermitian(f64),

    #[error("not a density matrix: {0}")]
    NotDensity(String),

    #[error("negative eigenvalue {0:.3e} beyond tolerance")]
    NegativeEigenvalue(f64),

    #[error("eigenvalue floor must be positive, got {0}")]
    BadFloor(f64),

    #[error("eigensolver failed: zheevd info = {0}")]
    EigFailed(i32),

    #[error("inconsistent marginals: defect {0:.3e}")]
    InconsistentMarginals(f64),

    #[error("window too small: {0}")]
    WindowTooSmall(String),

    #[error("element not in kernel of trace map (defect {0:.3e})")]
    NotInKernel(f64),

    #[error("degenerate state: {0}")]
    DegenerateState(String),

    #[error("solver did not converge: {0}")]
    NoConvergence(String),

    #[error("numerical health violation: {0}")]
    NumericalHealth(String),

    #[error("step size underflow at t = {t}: dt = {dt:.3e}")]
    StepUnderflow { t: f64, dt: f64 },

    #[error("symmetry violation: {0}")]
    SymmetryViolation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("runge-kutta tableau rejected: {0}")]
    BadTableau(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
