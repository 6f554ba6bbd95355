use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error("corrupt cache file {0}")]
    CorruptCache(PathBuf),
    #[error("stale cache file {path}: {reason}")]
    StaleCache { path: PathBuf, reason: String },
    #[error("provenance mismatch: {0}")]
    Provenance(String),
    #[error("{path}:{line}: {msg}")]
    Annotation { path: PathBuf, line: usize, msg: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("stage `{stage}` failed: {source}")]
    Stage { stage: String, source: Box<CoreError> },
    #[error("{0}")]
    Nn(#[from] diffyolo_nn::NnError),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
    #[error("image: {0}")]
    Image(#[from] ::image::ImageError),
    #[error("{0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(CoreError::Invalid(msg.into()))
}
