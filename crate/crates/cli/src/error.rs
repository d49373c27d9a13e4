use std::path::{Path, PathBuf};
use std::process::ExitCode;

use thiserror::Error;

/// Process exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok = 0,
    /// The input was read but contains validation failures.
    ValidationFailed = 1,
    /// Unreadable input, bad flags or malformed records.
    Format = 2,
    /// An internal invariant broke, or fitting diverged.
    Internal = 3,
}

impl From<Status> for ExitCode {
    fn from(s: Status) -> Self {
        ExitCode::from(s as u8)
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Format(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn status(&self) -> Status {
        match self {
            CliError::Io { .. } | CliError::Format(_) => Status::Format,
            CliError::Internal(_) => Status::Internal,
        }
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_owned(),
            source,
        }
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        CliError::Format(msg.into())
    }
}
