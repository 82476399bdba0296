use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("not an interior simplex point: {0}")]
    NotInterior(String),

    #[error("simplex boundary reached at t = {t}: p[{index}] = {value:e}")]
    BoundaryEvent { t: f64, index: usize, value: f64 },

    #[error("{0} is not positive definite")]
    NotPositiveDefinite(String),

    #[error("covariance lost positive definiteness at t = {t} (dt = {dt}); try a smaller step")]
    SpdViolation { t: f64, dt: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("eigenvalue computation failed: {0}")]
    EigenFailure(String),
}

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            what,
            expected,
            got,
        })
    }
}
