use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("parse error at row {row}, column '{column}': {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("no data rows")]
    NoData,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("zero variance: {0}")]
    ZeroVariance(String),

    #[error("no significant periodicity found")]
    NoPeriodicity,

    #[error("backend error: {0}")]
    Backend(String),

    #[error("remote backend error: {0}")]
    Remote(String),

    #[error("remote backend transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}
