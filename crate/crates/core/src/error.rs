use thiserror::Error;

/// Errors raised by the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: &'static str, reason: String },

    #[error("kernel family {0} is not differentiable")]
    UnsupportedKernel(&'static str),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("data line {line}: {reason}")]
    Data { line: u64, reason: String },

    #[error("empty sample")]
    EmptySample,

    #[error("oracle quantities are required for this operation")]
    MissingOracle,

    #[error("source-condition fit needs at least {needed} usable modes, found {found}")]
    InsufficientModes { needed: usize, found: usize },

    #[error("too many failed replications: {failed} of {total}")]
    TooManyInvalid { failed: usize, total: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        field,
        reason: reason.into(),
    }
}
