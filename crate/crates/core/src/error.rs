use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid matrix shape {rows}x{cols} for {len} elements")]
    InvalidShape { rows: usize, cols: usize, len: usize },

    #[error("block size {block} does not divide {dim} ({size})")]
    Indivisible {
        dim: &'static str,
        size: usize,
        block: usize,
    },

    #[error("dropout rate {0} is outside [0, 1)")]
    InvalidRate(f64),

    #[error("mask geometry mismatch: {0}")]
    MaskGeometry(String),

    #[error("{what} index {index} out of range (len {len})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("invalid mask file: {0}")]
    MaskFormat(String),

    #[error("invalid dataset file {path}: {reason}")]
    Dataset { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("layer context does not match: {0}")]
    Context(String),

    #[error("work counter mismatch: expected {expected}, observed {observed} ({what})")]
    WorkMismatch {
        what: String,
        expected: u64,
        observed: u64,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
