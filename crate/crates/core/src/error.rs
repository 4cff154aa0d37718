use std::io;

use thiserror::Error;

/// Errors raised by the boundary, runner and inference layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("spending sequence is defined only up to n = {len}, requested n = {n}")]
    SpendingOutOfRange { n: u64, len: u64 },

    #[error("boundaries degenerate at n = {n}: upper {upper} <= lower {lower}")]
    DegenerateBoundary { n: u64, upper: i64, lower: i64 },

    #[error("horizon {horizon} exceeds the computed boundary table (n_max = {n_max})")]
    HorizonBeyondTable { horizon: u64, n_max: u64 },

    #[error("boundary file format error: {0}")]
    Format(String),

    #[error("boundary file does not match the requested parameters: {0}")]
    ParameterMismatch(String),

    #[error("boundary state violates mass conservation (defect {defect:e})")]
    MassDefect { defect: f64 },

    #[error(
        "confidence limit not certified at horizon {horizon}: enclosure width {width:e} \
         exceeds tolerance {tolerance:e}; rerun with a larger horizon"
    )]
    Uncertified { horizon: u64, width: f64, tolerance: f64 },

    #[error("sample stream failed after {n} steps (partial sum {s}): {message}")]
    Source { n: u64, s: u64, message: String },

    #[error("sample stream ended before the first observation")]
    EmptyStream,

    #[error("search range does not bracket the target: {0}")]
    NonBracketing(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}
