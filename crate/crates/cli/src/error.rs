use brrl_core::BrrlError;
use brrl_rl::RlError;
use thiserror::Error;

/// Failures mapped onto the process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Exit 1: a check failed or a run diverged.
    #[error("{0}")]
    Failure(String),
    /// Exit 2: bad arguments or input files.
    #[error("{0}")]
    Input(String),
    /// Exit 3: the ratio bounds admit no solution.
    #[error("{0}")]
    Infeasible(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Failure(_) => 1,
            CliError::Input(_) => 2,
            CliError::Infeasible(_) => 3,
        }
    }

    pub fn input(context: &str, e: impl std::fmt::Display) -> Self {
        CliError::Input(format!("{context}: {e}"))
    }
}

impl From<RlError> for CliError {
    fn from(e: RlError) -> Self {
        match e {
            RlError::Usage(_) | RlError::Shape(_) => CliError::Input(e.to_string()),
            RlError::Core(inner) => inner.into(),
            other => CliError::Failure(other.to_string()),
        }
    }
}

impl From<BrrlError> for CliError {
    fn from(e: BrrlError) -> Self {
        match e {
            BrrlError::Invalid { .. } | BrrlError::Shape(_) | BrrlError::Io(_) => CliError::Input(e.to_string()),
            BrrlError::Domain(_) => CliError::Input(e.to_string()),
            BrrlError::Numeric(_) => CliError::Failure(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Failure(format!("i/o error: {e}"))
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Failure(format!("csv error: {e}"))
    }
}

pub type CliResult<T> = Result<T, CliError>;
