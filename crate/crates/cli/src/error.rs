use std::path::Path;
use std::process::ExitCode;

use pfnet_core::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad arguments, configuration or incompatible inputs.
    #[error("{0}")]
    Usage(String),
    /// Non-finite values or failed numeric checks.
    #[error("{0}")]
    Numeric(String),
    /// Unreadable, unwritable or malformed files.
    #[error("{0}")]
    Io(String),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Usage(_) => 1,
            CliError::Numeric(_) => 2,
            CliError::Io(_) => 3,
        })
    }

    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            _ if e.is_numeric() => CliError::Numeric(msg),
            Error::Io(_) | Error::BadMagic | Error::Truncated { .. } | Error::UnknownDtype(_) | Error::Format(_) => {
                CliError::Io(msg)
            }
            _ => CliError::Usage(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
