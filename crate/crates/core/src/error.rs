use thiserror::Error;

#[derive(Debug, Error)]
pub enum StabError {
    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("size mismatch: {0}")]
    SizeMismatch(String),

    #[error("numerical inconsistency: {0}")]
    NumericalInconsistency(String),

    #[error("unsupported configuration: {0}")]
    UnsupportedConfiguration(String),

    #[error("invalid usage: {0}")]
    InvalidUsage(String),

    #[error("resource guard: {0}")]
    ResourceGuard(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, StabError>;

impl From<std::io::Error> for StabError {
    fn from(e: std::io::Error) -> Self {
        StabError::Io(e.to_string())
    }
}
