use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum OfoError {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("step index {k} out of range for horizon {horizon}")]
    StepOutOfRange { k: usize, horizon: usize },
    #[error("dual variable {index} is negative ({value})")]
    NegativeMultiplier { index: usize, value: f64 },
    #[error("intersection projection did not converge after {sweeps} sweeps (residual {residual:e})")]
    ProjectionNotConverged { sweeps: usize, residual: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("symmetric eigensolver failed to converge")]
    EigenFailed,
    #[error("saddle-point oracle did not converge after {iterations} iterations (residual {residual:e})")]
    OracleNotConverged { iterations: usize, residual: f64 },
    #[error("iteration diverged at step {k}")]
    Diverged { k: usize },
    #[error("probe failed: {0}")]
    Probe(String),
    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("i/o error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, OfoError>;

pub(crate) fn check_dim(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(OfoError::DimensionMismatch {
            what,
            expected,
            found,
        })
    }
}
