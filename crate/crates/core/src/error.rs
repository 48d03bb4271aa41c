//! Shared error type for the workbench.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A structural precondition was violated (not a shape problem).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid model or run configuration.
    #[error("invalid config: {0}")]
    Config(String),

    /// Non-finite value where a finite one is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A feature name absent from (or inconsistent with) the schema.
    #[error("schema error: {0}")]
    Schema(String),

    /// Checkpoint cannot be applied to the requested configuration.
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    /// Metric is undefined on the given input (e.g. no eligible groups).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Malformed file or wire payload.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn schema(msg: impl Into<String>) -> Self {
        Error::Schema(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
