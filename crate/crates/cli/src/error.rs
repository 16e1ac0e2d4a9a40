use thiserror::Error;

/// Failure of a subcommand, carrying its process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments, unreadable or malformed inputs, unwritable outputs.
    #[error("{0}")]
    Usage(String),
    #[error("training failed: {0}")]
    Training(String),
    #[error("inference did not converge: {0}")]
    NotConverged(String),
    #[error("{failed} of {total} trials failed")]
    TrialErrors { failed: usize, total: usize },
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Training(_) => 3,
            CliError::NotConverged(_) => 4,
            CliError::TrialErrors { .. } => 5,
            CliError::Other(_) => 1,
        }
    }

    pub(crate) fn usage(e: impl std::fmt::Display) -> Self {
        CliError::Usage(e.to_string())
    }

    pub(crate) fn other(e: impl std::fmt::Display) -> Self {
        CliError::Other(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
