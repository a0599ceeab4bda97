use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's preconditions (shapes, bounds, ranges).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("patch at corner {corner:?} (n = {n}) does not fit its context inside volume {dims:?}")]
    OutOfBounds {
        corner: [usize; 3],
        n: usize,
        dims: [usize; 3],
    },

    #[error("non-finite value in {component}")]
    NonFinite { component: String },

    #[error("backward pass already ran on this graph; run a new forward pass first")]
    BackwardReplayed,

    #[error("batch-norm running statistics are uninitialized (no train-mode update yet)")]
    UninitializedStats,

    #[error("clip statistics have not been computed for this model")]
    MissingClipStats,

    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("checkpoint (format version {version}) does not match the model: {msg}")]
    CheckpointMismatch { version: u32, msg: String },

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Numerical failures abort with a distinct exit status from contract errors.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite { .. })
    }
}
