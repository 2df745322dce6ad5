//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by dictionary construction, data handling, solvers,
/// and the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (bad spec, fold counts, grids, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid or inconsistent data (malformed CSV, non-finite values,
    /// degenerate samples, ...).
    #[error("data error: {0}")]
    Data(String),

    /// A solver could not produce a usable result.
    #[error("solver error: {0}")]
    Solver(String),

    /// Hyperparameter tuning failed for every candidate.
    #[error("tuning error: {0}")]
    Tuning(String),

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn solver(msg: impl Into<String>) -> Self {
        Error::Solver(msg.into())
    }
}
