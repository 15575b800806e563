use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    /// Operand shapes are incompatible with the operation.
    #[error("{op}: dimension error: {detail}")]
    Dimension { op: &'static str, detail: String },
    /// A hyperparameter or structural setting is invalid.
    #[error("configuration error: {0}")]
    Config(String),
    /// An operation was asked to use state that was never populated.
    #[error("state error: {0}")]
    State(String),
    /// An API was called in a way its contract forbids.
    #[error("usage error: {0}")]
    Usage(String),
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
}

impl TensorError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Dimension {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
