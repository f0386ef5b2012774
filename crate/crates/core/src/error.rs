use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("index {index} out of range for grid with {len} cells")]
    OutOfBounds { index: usize, len: usize },

    #[error("degenerate box: {0}")]
    DegenerateBox(String),

    #[error("invalid box form `{0}` (expected `center` or `corner`)")]
    InvalidBoxForm(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("query set mismatch between teacher and student: {0}")]
    QuerySetMismatch(String),

    #[error("non-finite loss: {0}")]
    NonFinite(String),

    #[error("annotation parse error in {record}: {reason}")]
    Annotation { record: String, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("empty dataset split")]
    EmptySplit,

    #[error("model parameters are not loaded")]
    Unloaded,

    #[error("invalid layer selector: {0}")]
    LayerSelector(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("png error: {0}")]
    Png(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
