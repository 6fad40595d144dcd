//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Inputs whose shapes do not line up (vector lengths, matrix dims).
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// NaN or infinity where a finite number is required.
    #[error("non-finite input: {0}")]
    NonFinite(String),

    /// Out-of-range index into a matrix or series.
    #[error("index out of range: {0}")]
    Index(String),

    /// Invalid kernel or model parameter value.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Cholesky factorization failed; the matrix is not positive definite.
    #[error("ill-conditioned kernel matrix ({view})")]
    IllConditioned { view: String },

    /// The glucose missing-value sentinel (or a sub-floor value) reached an
    /// operation that requires an observed value.
    #[error("missing value: {0}")]
    MissingValue(String),

    /// A classifier was handed labels from a single class.
    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    /// Hyperparameter optimization failed on every restart. Carries the
    /// best model found so far, if any evaluation succeeded.
    #[error("fit failure: {message}")]
    FitFailure {
        message: String,
        best: Option<Box<crate::gp::GpModel>>,
    },

    /// Malformed record in an input file; `line` is 1-based and counts the
    /// header.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Header or column set does not match the documented schema.
    #[error("schema error: {0}")]
    Schema(String),

    /// Holdout split cannot be formed from the available span.
    #[error("split error: {0}")]
    Split(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn parameter(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }
}
