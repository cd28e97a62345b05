use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate quaternion (norm {0:e})")]
    DegenerateQuaternion(f64),

    #[error("training diverged at epoch {epoch} (loss {loss})")]
    TrainingFailure {
        epoch: usize,
        loss: f64,
        trace: Vec<f64>,
    },

    #[error("rank deficient: requested {requested} components, data supports {achievable}")]
    ReducedRank { requested: usize, achievable: usize },

    #[error("demonstration success rate {rate:.3} below abort threshold after {attempts} attempts")]
    LowSuccessRate { rate: f64, attempts: usize },

    #[error("usage: {0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end: 1 usage, 2 validation, 3 runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::InvalidArgument(_) => 1,
            Error::Validation(_) | Error::Parse { .. } | Error::Io { .. } | Error::Json(_) => 2,
            _ => 3,
        }
    }
}
