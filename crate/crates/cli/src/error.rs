use thiserror::Error;

/// Failures mapped onto process exit codes.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("output error: {0}")]
    Output(String),
    #[error("invariant violation: {0}")]
    Invariant(String),
}

impl CliError {
    /// 1 for invariant violations, 2 for everything the caller can fix.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Invariant(_) => 1,
            CliError::Config(_) | CliError::Parameter(_) | CliError::Output(_) => 2,
        }
    }
}

impl From<kvevict::Error> for CliError {
    fn from(e: kvevict::Error) -> Self {
        match e {
            kvevict::Error::Io(msg) => CliError::Output(msg),
            e if e.is_parameter() => CliError::Parameter(e.to_string()),
            e => CliError::Invariant(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Output(e.to_string())
    }
}
