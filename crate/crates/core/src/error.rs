use thiserror::Error;

/// Errors produced by the GC-FPCA library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("point {point} lies outside the domain [{lower}, {upper}]")]
    Domain { point: f64, lower: f64, upper: f64 },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid construction: {0}")]
    Construction(String),

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("convergence failure: {message}")]
    Convergence { message: String, trace: Vec<f64> },

    #[error("no subject-level variation in the random-effect matrix")]
    NoVariation,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn fit(msg: impl Into<String>) -> Self {
        Error::Fit(msg.into())
    }
}
