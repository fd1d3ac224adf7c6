//! Crate-wide error type.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    LossNotScalar { shape: Vec<usize> },

    #[error("value id {id} is not on this tape (len {len})")]
    NotOnTape { id: usize, len: usize },

    #[error("{what}: invalid argument: {detail}")]
    InvalidArgument { what: &'static str, detail: String },

    #[error("no usable prompt component: {reason}")]
    EmptyPrompt { reason: String },

    #[error(
        "image {h}x{w} exceeds the exact dense pairwise limit of {limit}x{limit}; \
         downscale the input before refinement"
    )]
    CrfImageTooLarge { h: usize, w: usize, limit: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing file referenced by manifest: {path}")]
    MissingFile { path: PathBuf },

    #[error("corrupt payload in {path}: {detail}")]
    CorruptPayload { path: PathBuf, detail: String },

    #[error("dimension mismatch in {path}: expected {expected}, got {got}")]
    DimensionMismatch {
        path: PathBuf,
        expected: String,
        got: String,
    },

    #[error("invalid manifest {path}: {detail}")]
    InvalidManifest { path: PathBuf, detail: String },

    #[error("split '{split}' is empty")]
    EmptySplit { split: String },

    #[error("non-finite gradient in parameter block '{block}'; step aborted")]
    NonFiniteGradient { block: String },

    #[error("policy is frozen and rejects updates")]
    FrozenPolicy,

    #[error("checkpoint {path}: {detail}")]
    BadCheckpoint { path: PathBuf, detail: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
