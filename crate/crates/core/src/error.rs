//! Error type shared by every module in the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid model/architecture configuration (bad dimensions, bad flags).
    #[error("configuration error: {0}")]
    Config(String),

    /// Dataset-level problems: empty data, malformed schema, bad splits.
    #[error("data error: {0}")]
    Data(String),

    /// CSV cell that failed to parse, with its location.
    #[error("row {row}, column \"{column}\": {message}")]
    Csv {
        row: usize,
        column: String,
        message: String,
    },

    /// A covariate required for prediction is missing; impute first.
    #[error("covariate {index} (\"{name}\") is missing; run imputation before predicting")]
    MissingCovariate { index: usize, name: String },

    /// Mathematical domain violation (nonpositive variance, out-of-range input).
    #[error("domain error: {0}")]
    Domain(String),

    /// NaN/Inf surfaced during training, with the epoch and batch it appeared in.
    #[error("numerical failure at epoch {epoch}, batch {batch}: {message}")]
    Numerical {
        epoch: usize,
        batch: usize,
        message: String,
    },

    /// A required trained component is absent.
    #[error("untrained component: {0}")]
    Untrained(String),

    /// The dependence model produced estimates inconsistent beyond Monte Carlo noise.
    #[error("dependence model misfit: {0}")]
    DependenceMisfit(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialization(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}
