//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    #[error("graph already consumed by backward")]
    GraphConsumed,

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("bad magic bytes (expected \"EVPT\")")]
    BadMagic,

    #[error("unsupported format version {0}")]
    BadVersion(u8),

    #[error("unknown dtype tag {0}")]
    BadDtype(u8),

    #[error("dtype mismatch: file holds {found}, requested {expected}")]
    DtypeMismatch { expected: &'static str, found: &'static str },

    #[error("truncated file: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },

    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("numerical failure at step {step}: {msg}")]
    TrainAbort { step: usize, msg: String },

    #[error("gradient check failed: {0}")]
    GradientMismatch(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }

    /// True for failures of the numeric kind (NaN/Inf, aborted training,
    /// analytic/finite-difference disagreement) as opposed to validation
    /// or i/o problems.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::TrainAbort { .. } | Error::GradientMismatch(_)
        )
    }
}
