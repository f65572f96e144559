use thiserror::Error;

use mgk_core::MgkError;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad config or arguments; exit status 1.
    #[error("{0}")]
    Validation(String),

    /// Failure while running a valid experiment; exit status 2.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<MgkError> for CliError {
    fn from(e: MgkError) -> Self {
        match e {
            MgkError::Config(_) | MgkError::Domain(_) => CliError::Validation(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}
