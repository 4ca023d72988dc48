use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index {index} out of range for {len} samples")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("{what} did not reach tolerance {tol:e} after {iters} iterations (residual {residual:e})")]
    ToleranceNotMet {
        what: &'static str,
        iters: usize,
        residual: f64,
        tol: f64,
    },

    #[error("unsupported metric: {0}")]
    UnsupportedMetric(String),

    #[error("SABA memory used before initialization")]
    Uninitialized,

    #[error("every grid cell diverged")]
    NoConvergentCell,

    #[error("reference cache rejected: {0}")]
    StaleCache(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn check_len(what: &'static str, slice: &[f64], expected: usize) -> Result<()> {
    if slice.len() != expected {
        return Err(Error::DimensionMismatch {
            what,
            expected,
            got: slice.len(),
        });
    }
    Ok(())
}
