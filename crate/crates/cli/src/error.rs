//! CLI error taxonomy mapped onto process exit codes:
//! 2 config, 3 numerical, 4 I/O.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(avq_core::Error),

    #[error("I/O error: {0}")]
    Io(std::io::Error),

    #[error("I/O error: {0}")]
    Format(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) | CliError::Format(_) => 4,
        }
    }
}

impl From<avq_core::Error> for CliError {
    fn from(e: avq_core::Error) -> Self {
        match e {
            avq_core::Error::Io(io) => CliError::Io(io),
            avq_core::Error::Archive(msg) => CliError::Format(msg),
            other => CliError::Numerical(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Format(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
