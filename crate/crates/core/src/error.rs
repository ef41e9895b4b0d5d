use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("optimizer error: {0}")]
    Optimizer(String),

    #[error("copula fit failed: {0}")]
    Fit(String),

    #[error("model selection failed: {0}")]
    Selection(String),

    #[error("diagnostic error: {0}")]
    Diagnostic(String),

    #[error("estimator failed: {0}")]
    Estimator(String),

    #[error("task error: {0}")]
    Task(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        Error::Checkpoint(err.to_string())
    }
}
