use std::path::PathBuf;

use cced::CcedError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration or command usage.
    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file or dataset that could not be read or used.
    #[error(transparent)]
    Data(CcedError),

    #[error(transparent)]
    Campaign(CcedError),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } | CliError::Data(_) => 3,
            CliError::Campaign(_) => 4,
        }
    }
}

impl From<CcedError> for CliError {
    fn from(e: CcedError) -> Self {
        match e {
            CcedError::Campaign { .. } => CliError::Campaign(e),
            other => CliError::Data(other),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
