use std::process::ExitCode;

use thiserror::Error;

/// Command failures, each mapped to a process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    PropertyFailure(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::PropertyFailure(_) => 1,
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
        })
    }
}

impl From<kdvr_core::Error> for CliError {
    fn from(e: kdvr_core::Error) -> Self {
        use kdvr_core::Error as E;
        match e {
            E::Io(_) | E::Format { .. } | E::EmptyDataset => CliError::Io(e.to_string()),
            E::ConstantsInvalid { .. } => CliError::PropertyFailure(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
