use thiserror::Error;

/// Errors raised by the numerical routines of this crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("empty generator list")]
    EmptySet,

    #[error("non-finite coordinate in {0}")]
    NonFinite(&'static str),

    #[error("negative weight {weight} at position {index}")]
    NegativeWeight { index: usize, weight: f64 },

    #[error("length mismatch: {left} weights but {right} sets")]
    LengthMismatch { left: usize, right: usize },

    #[error("{what} did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("row {row} is not a probability row: {reason}")]
    NotStochastic { row: usize, reason: String },

    #[error("state index {index} out of range for alphabet of size {size}")]
    InvalidIndex { index: usize, size: usize },

    #[error("invalid step schedule: {0}")]
    InvalidSchedule(String),

    #[error("iterate became non-finite at step {step}")]
    Divergence { step: usize },

    #[error("expected a unique stationary distribution, found {count} vertices")]
    NonUniqueStationary { count: usize },

    #[error("{0}")]
    InvalidInput(String),

    #[error("value {value} outside [{lo}, {hi}]")]
    OutOfRange { value: f64, lo: f64, hi: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch { expected, found });
    }
    Ok(())
}
