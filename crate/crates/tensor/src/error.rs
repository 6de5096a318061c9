use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("invalid shape {shape:?} for {len} elements")]
    BadShape { shape: Vec<usize>, len: usize },
    #[error("degenerate embedding: L2 norm {norm:e} is below {eps:e}")]
    DegenerateEmbedding { norm: f64, eps: f64 },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss is detached from every trainable leaf")]
    Detached,
    #[error("kernel {kernel} larger than padded input {padded}")]
    KernelTooLarge { kernel: usize, padded: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn mismatch(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}
