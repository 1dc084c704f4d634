use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("bad config: {0}")]
    Config(String),

    #[error("missing input: {0}")]
    Missing(String),

    #[error(transparent)]
    Runtime(gridcast::Error),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    /// Process exit status: 1 for configuration, 2 for absent inputs, 3 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Missing(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl From<gridcast::Error> for CliError {
    fn from(e: gridcast::Error) -> Self {
        match e {
            gridcast::Error::Config(msg) => CliError::Config(msg),
            gridcast::Error::MaskLength { .. } => CliError::Config(e.to_string()),
            gridcast::Error::Io(io) if io.kind() == io::ErrorKind::NotFound => CliError::Missing(io.to_string()),
            other => CliError::Runtime(other),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Runtime(gridcast::Error::Io(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(gridcast::Error::Json(e))
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
