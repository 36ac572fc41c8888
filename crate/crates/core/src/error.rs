use thiserror::Error;

/// Errors raised by the simulator and its analysis routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid privacy budget: {0}")]
    InvalidBudget(String),

    #[error("round {round} is outside the schedule range [1, {max_rounds}]")]
    RoundOutOfRange { round: usize, max_rounds: usize },

    #[error("no rounds remain: new maximum {new_max} must exceed the current round {round}")]
    NoRemainingRounds { round: usize, new_max: usize },

    #[error("degenerate noise variance {variance} at round {round}")]
    DegenerateVariance { round: usize, variance: f64 },

    #[error("dissimilarity is undefined because the global gradient vanishes")]
    UndefinedDissimilarity,

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid label {label} at sample {index}: {reason}")]
    InvalidLabel { index: usize, label: f64, reason: String },

    #[error("aggregation weights sum to {sum}, expected 1")]
    WeightSum { sum: f64 },

    #[error("non-finite value in round {round}: {what}")]
    NonFinite { round: usize, what: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
