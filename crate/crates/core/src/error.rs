use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm is below 1e-12 and cannot be normalized")]
    ZeroVector,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("text sample is empty")]
    EmptyText,

    #[error("image sample has no pixels")]
    EmptyImage,

    #[error("sample content does not match its modality: {0}")]
    ModalityMismatch(String),

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),

    #[error("label {0:?} already exists")]
    DuplicateLabel(String),

    #[error("class {0:?} has no exemplars")]
    EmptyClass(String),

    #[error("unknown label {0:?}")]
    UnknownLabel(String),

    #[error("store has no entries")]
    EmptyStore,

    #[error("length mismatch: {left} predictions vs {right} truths")]
    LengthMismatch { left: usize, right: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
