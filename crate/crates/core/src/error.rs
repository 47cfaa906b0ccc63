use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the counting toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("not found: {0}")]
    NotFound(PathBuf),
    #[error("corrupt dataset: {0}")]
    CorruptDataset(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("index out of range: {0}")]
    OutOfRange(String),
    #[error("insufficient frames: need {needed}, have {available}")]
    InsufficientFrames { needed: usize, available: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid label: {0}")]
    InvalidLabel(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("empty evaluation set")]
    EmptyEval,
    #[error("undefined: {0}")]
    Undefined(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("training diverged at step {step}")]
    Diverged {
        step: usize,
        last_good: Box<crate::training::Checkpoint<f32>>,
    },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io {
            path: path.into(),
            source,
        })
    }
}
