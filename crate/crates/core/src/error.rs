use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CtdnError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("zero-norm vector in {0}")]
    ZeroVector(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid probability distribution: {0}")]
    InvalidDistribution(String),

    #[error("unknown phrase `{0}`")]
    UnknownPhrase(String),

    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("degenerate matrix: {0}")]
    DegenerateMatrix(String),

    #[error("no gradient reached the activation map")]
    NoGradient,

    #[error("infeasible placement after {0} attempts")]
    InfeasiblePlacement(usize),

    #[error("crop {crop:?} larger than image {image:?}")]
    CropTooLarge {
        crop: (usize, usize),
        image: (usize, usize),
    },

    #[error("training diverged at step {step}: {what}")]
    Diverged { step: usize, what: String },

    #[error("frozen parameter `{0}` was modified")]
    FrozenMutated(String),

    #[error("missing pseudo masks for images: {0:?}")]
    MissingMasks(Vec<String>),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid format in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("png error at {path}: {msg}")]
    Png { path: PathBuf, msg: String },
}

pub type Result<T> = std::result::Result<T, CtdnError>;

impl CtdnError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CtdnError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn dims(msg: impl Into<String>) -> Self {
        CtdnError::DimensionMismatch(msg.into())
    }
}
