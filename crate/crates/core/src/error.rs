use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the augmentation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid sentence: {0}")]
    InvalidSentence(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("no sampleable example: every sentence has length <= {min_length}")]
    NothingToSample { min_length: usize },

    #[error("span out of bounds: start {start}, length {len}, sentence length {sentence_len}")]
    SpanOutOfBounds {
        start: usize,
        len: usize,
        sentence_len: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch for `{name}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("model input error: {0}")]
    ModelInput(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at iteration {iteration}: loss is {loss}")]
    Diverged { iteration: usize, loss: f64 },

    #[error("corpora are misaligned: {0}")]
    Misaligned(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
