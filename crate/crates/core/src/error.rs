use thiserror::Error;

pub type Result<T> = std::result::Result<T, HimatError>;

#[derive(Debug, Error)]
pub enum HimatError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward() requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("gradient tape already consumed by a previous backward()")]
    TapeConsumed,

    #[error("function is not deterministic: two forward passes differ by {0:e}")]
    NonDeterministicFunction(f64),

    #[error("unknown wavelet basis '{0}' (expected haar, sym4 or sym19)")]
    UnknownBasis(String),

    #[error("wavelet transform needs even spatial dims, got {0}x{1}")]
    OddDimensions(usize, usize),

    #[error("diffusion time {0} outside [0, 1]")]
    TOutOfRange(f64),

    #[error("loss became non-finite at step {step}: {detail}")]
    NaNLoss { step: usize, detail: String },

    #[error("spatial dims {height}x{width} not divisible by codec factor {factor}")]
    IndivisibleDims { height: usize, width: usize, factor: usize },

    #[error("scaling fit needs at least 3 positive points, got {0}")]
    InsufficientPoints(usize),

    #[error("condition token {id} outside vocabulary of size {vocab}")]
    TokenOutOfVocab { id: usize, vocab: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("malformed tensor file: {0}")]
    Format(String),

    #[error("image error: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HimatError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        HimatError::ShapeMismatch { op, detail: detail.into() }
    }
}
