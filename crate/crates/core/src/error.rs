use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("{what} diverged at step {step}")]
    Diverged { what: String, step: usize },
    #[error("no data")]
    NoData,
    #[error("noise support violation: noise density is zero at a scored point")]
    NoiseSupport,
    #[error("singular matrix: {0}")]
    Singular(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("malformed binary data: {0}")]
    Format(String),
    #[error("environment fault: {0}")]
    Environment(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse { line, msg: msg.into() }
    }
}

pub(crate) fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}
