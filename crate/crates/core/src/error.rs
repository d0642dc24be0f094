use std::path::PathBuf;

use fan_autograd::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FanError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("incompatible checkpoint: {0}")]
    Compatibility(String),
    #[error("scene generation failed: {0}")]
    Generation(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

impl FanError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FanError::Io { path: path.into(), source }
    }

    /// Errors caused by bad user input rather than a failure while running.
    pub fn is_validation(&self) -> bool {
        match self {
            FanError::Config(_) | FanError::Data(_) | FanError::Compatibility(_) => true,
            FanError::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            FanError::Tensor(e) => matches!(e, TensorError::Config(_) | TensorError::Data(_) | TensorError::Index { .. }),
            FanError::Generation(_) | FanError::NonFinite(_) => false,
        }
    }
}

pub type Result<T, E = FanError> = std::result::Result<T, E>;
