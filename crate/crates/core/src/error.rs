use thiserror::Error;

/// Errors raised by the library. Configuration and I/O failures of the
/// command-line front end live in [`crate::cli::CliError`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("no interior MLE: sample mean of statistic {coord} is {value}, on the boundary of the mean-parameter range")]
    NoInteriorMle { coord: usize, value: f64 },

    #[error("Newton solver did not converge after {iterations} iterations (moment residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },

    #[error("operation `{op}` is not supported for the {family} family")]
    UnsupportedFamily { op: &'static str, family: &'static str },

    #[error("state space of {states} configurations exceeds the enumeration cap of {cap}")]
    StateSpaceTooLarge { states: u64, cap: u64 },

    #[error("matrix is not row-stochastic: row {row} sums to {sum}")]
    NotStochastic { row: usize, sum: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
