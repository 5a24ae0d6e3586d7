use thiserror::Error;

/// Errors raised by the numerical routines in this crate.
#[derive(Debug, Error)]
pub enum LocoError {
    #[error("{what} = {value} is outside {allowed}")]
    Domain {
        what: &'static str,
        value: f64,
        allowed: &'static str,
    },

    #[error("singular at t = {t}: {reason}")]
    Singular { t: f64, reason: &'static str },

    #[error("dimension {dim} exceeds the dense limit of {limit}")]
    Capacity { dim: usize, limit: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("degenerate edit direction: {0}")]
    DegenerateDirection(String),

    #[error("ill-conditioned problem: {0}")]
    Conditioning(String),

    #[error("adjoint mismatch: relative defect {defect:e} exceeds {tolerance:e}")]
    AdjointMismatch { defect: f64, tolerance: f64 },

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, LocoError>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(LocoError::DimensionMismatch { expected, got })
    }
}
