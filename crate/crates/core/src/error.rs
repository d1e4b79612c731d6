use thiserror::Error;

/// Errors produced across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An operation was called in the wrong order, e.g. backward before forward.
    #[error("invalid state: {0}")]
    State(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    /// A metric has no defined value for the given inputs (e.g. AUROC with one class).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
