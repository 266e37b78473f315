use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("seminorm level {level} out of range (max level {max})")]
    LevelOutOfRange { level: usize, max: usize },

    #[error("ordering violated: {0}")]
    Ordering(String),

    #[error("time {t} outside [0, {horizon}]")]
    TimeOutOfRange { t: f64, horizon: f64 },

    #[error("invalid model: {0}")]
    Model(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("unsupported mode: {0}")]
    Mode(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}
