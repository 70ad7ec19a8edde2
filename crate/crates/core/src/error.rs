//! Error type shared by every module of the crate.

use thiserror::Error;

/// Failures raised by loading, solving, filtering and simulating.
#[derive(Debug, Error)]
pub enum Error {
    /// The configuration text does not match the documented schema.
    #[error("config parse error: {0}")]
    Parse(String),

    /// A coefficient has the wrong shape for the declared dimensions.
    #[error("dimension mismatch in `{key}`: expected {expected}, found {found}")]
    Dimension {
        key: String,
        expected: String,
        found: String,
    },

    /// A time argument falls outside the horizon.
    #[error("time {t} outside [0, {horizon}]")]
    Domain { t: f64, horizon: f64 },

    /// A uniform positivity requirement failed during integration.
    #[error("positivity loss in {quantity} at t = {t}: minimum eigenvalue {eigenvalue:.3e} below floor {floor:.1e}")]
    PositivityLoss {
        quantity: &'static str,
        t: f64,
        eigenvalue: f64,
        floor: f64,
    },

    /// A state or solution path became non-finite.
    #[error("divergence in {context} at t = {t}")]
    Divergence { context: String, t: f64 },

    /// The common observation cannot be inverted for the common noise.
    #[error("common observation degenerate at t = {t}: |sigma_check| = {value:e}")]
    DegenerateCommonObservation { t: f64, value: f64 },

    /// The individual observation noise covariance is singular.
    #[error("observation noise covariance singular at t = {t}")]
    DegenerateObservation { t: f64 },

    /// An operation was called with inputs violating its precondition.
    #[error("precondition failed: {0}")]
    Precondition(String),

    /// An argument is outside the accepted range.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// Reading or writing a file failed.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// CSV serialization failed.
    #[error(transparent)]
    Csv(#[from] csv::Error),

    /// JSON serialization failed.
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
