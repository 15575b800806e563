use std::path::PathBuf;

use ldca_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LdcaError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode image {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("training diverged at episode {episode} (lr {lr}): loss is not finite")]
    Diverged { episode: u64, lr: f64 },
}

impl LdcaError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LdcaError::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, used for single-line CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            LdcaError::Tensor(TensorError::Dimension { .. }) => "dimension",
            LdcaError::Tensor(TensorError::Config(_)) | LdcaError::Config(_) => "config",
            LdcaError::Tensor(TensorError::State(_)) => "state",
            LdcaError::Tensor(TensorError::Usage(_)) | LdcaError::Usage(_) => "usage",
            LdcaError::Tensor(TensorError::NonFinite { .. }) => "non_finite",
            LdcaError::Input(_) => "input",
            LdcaError::Data(_) => "data",
            LdcaError::Io { .. } => "io",
            LdcaError::Image { .. } => "image",
            LdcaError::Checkpoint(_) => "checkpoint",
            LdcaError::Diverged { .. } => "diverged",
        }
    }
}

pub type Result<T, E = LdcaError> = std::result::Result<T, E>;
