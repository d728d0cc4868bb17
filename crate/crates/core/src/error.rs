use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad input or configuration, rejected before any computation.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("matrix is not symmetric: relative asymmetry {asymmetry:.3e} exceeds {tolerance:.1e}")]
    NotSymmetric { asymmetry: f64, tolerance: f64 },

    #[error("{what} did not converge after {iterations} iterations ({state})")]
    NotConverged { what: &'static str, iterations: usize, state: String },

    /// A coordinate of a rank-one problem sits numerically on top of a root and must be deflated.
    #[error("near-deflation at coordinate {coordinate}: lambda_k - root underflowed")]
    NearDeflation { coordinate: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("divergence at step {step} (eta = {eta}): loss {loss:.3e} exceeds guard {guard:.3e}")]
    Divergence { eta: f64, step: usize, loss: f64, guard: f64 },

    #[error("integrator instability at t={time:.4}: loss rose from {before:.6e} to {after:.6e}; reduce dt")]
    Instability { time: f64, before: f64, after: f64 },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Validation(msg.into()))
}
