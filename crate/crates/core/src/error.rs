use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("empty point cloud: {0}")]
    EmptyCloud(&'static str),

    #[error("partial view removed every point")]
    EmptyView,

    #[error("registration diverged at iteration {iteration}: {reason}")]
    Diverged { iteration: usize, reason: String },

    #[error("registration of instance `{instance}` failed: {source}")]
    Registration {
        instance: String,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite energy at iteration {iteration} (x = {latent:?})")]
    NonFiniteEnergy { iteration: usize, latent: Vec<f64> },

    #[error("linear solve failed: {0}")]
    Solve(String),

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("unsupported model version {0}")]
    UnsupportedVersion(u32),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
