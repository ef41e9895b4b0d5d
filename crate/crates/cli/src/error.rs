use thiserror::Error;

/// Failure classes with their process exit codes.
///
/// | code | class |
/// |---|---|
/// | 1 | I/O while writing outputs |
/// | 2 | malformed or inconsistent input data |
/// | 3 | invalid configuration, flags or task names |
/// | 4 | estimator failure on every seed |
/// | 5 | missing or corrupt checkpoint |
#[derive(Debug, Error)]
pub enum CliError {
    #[error("input error: {0}")]
    Input(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("estimator error: {0}")]
    Estimator(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io(_) => 1,
            CliError::Input(_) => 2,
            CliError::Config(_) => 3,
            CliError::Estimator(_) => 4,
            CliError::Checkpoint(_) => 5,
        }
    }
}

impl From<vcmi::Error> for CliError {
    fn from(e: vcmi::Error) -> Self {
        use vcmi::Error as E;
        match e {
            E::Data(_) | E::Shape(_) | E::Domain(_) => CliError::Input(e.to_string()),
            E::Config(_) | E::Task(_) => CliError::Config(e.to_string()),
            E::Checkpoint(_) => CliError::Checkpoint(e.to_string()),
            E::Io(io) => CliError::Io(io),
            other => CliError::Estimator(other.to_string()),
        }
    }
}
