use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is singular or below the eigenvalue floor (smallest value {0:e})")]
    SingularMatrix(f64),
    #[error("matrix is not Hermitian (asymmetry {0:e})")]
    NotHermitian(f64),
    #[error("matrix is not unitary (residual {0:e})")]
    NotUnitary(f64),
    #[error("matrix is not skew-Hermitian (asymmetry {0:e})")]
    NotSkewHermitian(f64),
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
    #[error("invalid time step {0}")]
    InvalidStep(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("step too large: phase increment {0:.3} rad exceeds the unwrap guard")]
    StepTooLarge(f64),
    #[error("point left the affine chart (|det| = {0:e})")]
    OutsideChart(f64),
    #[error("finite-difference step {0} outside [1e-5, 1e-2]")]
    DegenerateStep(f64),
    #[error("simplex state touches the boundary (smallest eigenvalue {0:e})")]
    BoundaryContact(f64),
    #[error("simplex state cannot be repaired (sum deviation {0:e})")]
    IrreparableState(f64),
    #[error("block is singular (|det| = {0:e})")]
    SingularBlock(f64),
    #[error("flag points have different dimensions")]
    ChartMismatch,
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("no convergence after {iterations} iterations (last location {location}, scale {scale})")]
    NoConvergence { iterations: usize, location: f64, scale: f64 },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("runtime failure: {0}")]
    RuntimeFailure(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
