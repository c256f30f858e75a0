use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("schema mismatch: {rejected} of {total} lines carry unknown labels ({labels:?})")]
    SchemaMismatch {
        rejected: usize,
        total: usize,
        labels: Vec<String>,
    },

    #[error("degenerate split: sizes {train}/{dev}/{test}")]
    DegenerateSplit { train: usize, dev: usize, test: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("alpha is undefined: expected disagreement is zero (only one category observed)")]
    UndefinedAlpha,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("sequence has no unmasked positions")]
    EmptySequence,

    #[error("index {index} out of range for {len} classes")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("training diverged at epoch {epoch}, step {step}")]
    Diverged {
        epoch: usize,
        step: usize,
        last_good: Box<crate::model::ModelBundle>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
