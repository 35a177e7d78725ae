//! Crate-wide error type.
//!
//! One enum covers the whole pipeline so library calls compose with `?`
//! without per-module error conversions. Variants mirror the failure
//! classes callers are expected to tell apart: shape/contract violations,
//! bad configuration, numeric breakdown (NaN/Inf), malformed files, and
//! metrics that are undefined for a given input (empty masks).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or volume extents do not match what an operation requires.
    #[error("shape error: {0}")]
    Shape(String),

    /// A configuration value violates its documented range or a
    /// cross-field constraint.
    #[error("config error: {0}")]
    Config(String),

    /// A computation produced or received a non-finite value, or an
    /// input is numerically unusable (e.g. zero-norm embedding).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An on-disk artifact is malformed: bad magic, wrong checksum,
    /// truncated payload, unknown field.
    #[error("format error: {0}")]
    Format(String),

    /// A checkpoint does not match the model it is being loaded into.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A dataset is inconsistent with itself or with the requested
    /// operation (missing view, mismatched geometry, unknown patient).
    #[error("data error: {0}")]
    Data(String),

    /// A statistical routine received input outside its domain.
    #[error("stats error: {0}")]
    Stats(String),

    /// A metric is undefined for this input (e.g. surface distance of an
    /// empty mask). Callers report these as missing values.
    #[error("undefined metric: {0}")]
    Undefined(String),

    /// An internal contract was violated by the caller (programming
    /// error rather than bad data).
    #[error("contract error: {0}")]
    Contract(String),

    /// A self-check (gradient check, determinism probe) failed to run.
    #[error("check error: {0}")]
    Check(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
