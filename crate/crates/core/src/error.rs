use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("signals live on different time grids")]
    GridMismatch,

    #[error("time {t} outside of [{t0}, {tf}]")]
    OutOfRange { t: f64, t0: f64, tf: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("integration diverged at t = {t}")]
    Divergence { t: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("R(t) is not positive definite at t = {t} (smallest eigenvalue {min_eigenvalue})")]
    NotPositiveDefinite { t: f64, min_eigenvalue: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("malformed data file {path}: {reason}")]
    Data { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch {
            what,
            expected,
            got,
        });
    }
    Ok(())
}
