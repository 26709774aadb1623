use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch { op: &'static str, expected: String, got: String },

    #[error("channel count {0} must be even for the reference block split")]
    OddChannelCount(usize),

    #[error("image {height}x{width} is too small (minimum side {min})")]
    ImageTooSmall { height: usize, width: usize, min: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("non-finite activation at {0}")]
    NonFiniteActivation(String),

    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(u64),

    #[error("provider unavailable: {0}")]
    ProviderUnavailable(String),

    #[error("malformed provider response: {0}")]
    MalformedResponse(String),

    #[error("embedding shape mismatch: expected {expected:?}, got {got:?}")]
    EmbeddingShapeMismatch { expected: (usize, usize), got: (usize, usize) },

    #[error("empty text cannot be encoded")]
    EmptyText,

    #[error("cache entry {image_id} is corrupt: {reason}")]
    CacheCorrupt { image_id: String, reason: String },

    #[error("not found: {0}")]
    NotFound(String),

    #[error("no prior bundle for image {0}")]
    MissingBundle(String),

    #[error("dataset is empty: {0}")]
    DatasetEmpty(String),

    #[error("invalid value: {0}")]
    InvalidArgument(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image codec: {0}")]
    Codec(#[from] ::image::ImageError),
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl Into<String>, got: impl std::fmt::Debug) -> Self {
        Error::ShapeMismatch { op, expected: expected.into(), got: format!("{got:?}") }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Error::Io { path, source }
    }
}
