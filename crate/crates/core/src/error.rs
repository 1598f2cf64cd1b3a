use thiserror::Error;

/// Errors raised by the library. Each variant names the stage or item at fault.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid series: {0}")]
    InvalidSeries(String),

    #[error("shape mismatch in {stage}: {detail}")]
    Shape { stage: String, detail: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("malformed container: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(stage: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            stage: stage.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
