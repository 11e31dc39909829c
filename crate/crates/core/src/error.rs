use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{0}: non-finite value encountered")]
    Numeric(&'static str),

    #[error("loss mask selects no positions")]
    EmptyLoss,

    #[error("token id {id} out of range for vocabulary of {size}")]
    Vocabulary { id: usize, size: usize },

    #[error("sequence of length {needed} exceeds capacity {capacity} ({what})")]
    Capacity {
        what: &'static str,
        needed: usize,
        capacity: usize,
    },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("backward already ran on this tape; reset gradients first")]
    BackwardTwice,

    #[error("backward root must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("invalid state: {0}")]
    State(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("training diverged at step {step} (loss = {loss})")]
    Divergence { step: usize, loss: f64 },

    #[error("every sweep trial failed: {}", .0.join("; "))]
    SweepFailed(Vec<String>),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI, grouped by failure category.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) | Error::State(_) => 2,
            Error::Io { .. } | Error::Format { .. } | Error::Serde(_) => 3,
            Error::Divergence { .. } | Error::SweepFailed(_) => 4,
            _ => 1,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
