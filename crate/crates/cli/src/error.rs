use ofo_core::OfoError;
use thiserror::Error;

/// Exit status for a successful command.
pub const EXIT_OK: i32 = 0;
/// Bad manifest, missing file, invalid parameter.
pub const EXIT_CONFIG: i32 = 2;
/// Divergence, oracle or eigensolver failure.
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical error: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Numerical(_) => EXIT_NUMERICAL,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }
}

impl From<OfoError> for CliError {
    fn from(e: OfoError) -> Self {
        match e {
            OfoError::DimensionMismatch { .. }
            | OfoError::StepOutOfRange { .. }
            | OfoError::InvalidParameter(_)
            | OfoError::Config { .. }
            | OfoError::Io(_) => CliError::Config(e.to_string()),
            OfoError::NegativeMultiplier { .. }
            | OfoError::ProjectionNotConverged { .. }
            | OfoError::EigenFailed
            | OfoError::OracleNotConverged { .. }
            | OfoError::Diverged { .. }
            | OfoError::Probe(_) => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Config(format!("i/o: {e}"))
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Config(format!("csv: {e}"))
    }
}

pub type CliResult<T> = Result<T, CliError>;
