use std::process::ExitCode;

use horizon_fuse::Error as CoreError;

/// Error of a CLI command, classified by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, grids or configuration (exit 2).
    #[error("usage: {0}")]
    Usage(String),
    /// Missing, malformed or misaligned input data (exit 3).
    #[error("data: {0}")]
    Data(String),
    /// A numerical routine failed (exit 4).
    #[error("numerical: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        })
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let msg = e.to_string();
        match e {
            CoreError::Domain(_) | CoreError::InvalidParameter(_) | CoreError::Unsupported(_) => CliError::Usage(msg),
            CoreError::Estimation(_)
            | CoreError::Data(_)
            | CoreError::Io(_)
            | CoreError::Json(_)
            | CoreError::Csv(_) => CliError::Data(msg),
            CoreError::Degenerate(_) | CoreError::Numerical(_) | CoreError::NonConvergence { .. } => {
                CliError::Numerical(msg)
            }
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
