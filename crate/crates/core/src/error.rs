use std::path::PathBuf;

use gama_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GamaError {
    #[error("{field}: {message}")]
    Config { field: String, message: String },
    #[error("data error: {0}")]
    Data(String),
    #[error("incompatible artifacts: {0}")]
    Compat(String),
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated file")]
    Truncated,
    #[error("checksum failure")]
    Checksum,
    #[error("kind mismatch: expected {expected}, found {found}")]
    KindMismatch { expected: String, found: String },
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("frozen model weights changed: {0}")]
    FrozenMutation(String),
    #[error("perturbation budget violated: {0}")]
    Budget(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, GamaError>;

impl GamaError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        GamaError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GamaError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 config, 3 data, 4 artifact compatibility, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            GamaError::Config { .. } => 2,
            GamaError::Data(_)
            | GamaError::BadMagic { .. }
            | GamaError::UnsupportedVersion(_)
            | GamaError::Truncated
            | GamaError::Checksum
            | GamaError::Io { .. } => 3,
            GamaError::Compat(_) | GamaError::KindMismatch { .. } => 4,
            GamaError::Tensor(TensorError::DegenerateEmbedding { .. }) => 3,
            _ => 1,
        }
    }
}
