use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller violated an operation precondition (bad arguments).
    #[error("usage error: {0}")]
    Usage(String),
    #[error("configuration error: {0}")]
    Config(String),
    /// Analog phase ordering was violated (e.g. accumulation during a DP phase).
    #[error("sequencing error: {0}")]
    Sequencing(String),
    #[error("capacity error: {what} needs {required} but only {available} available")]
    Capacity {
        what: String,
        required: usize,
        available: usize,
    },
    #[error("load error: {0}")]
    Load(String),
    #[error("unmappable layer: {0}")]
    Unmappable(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Unmappable(_) => 3,
            Error::Usage(_) | Error::Config(_) | Error::Load(_) => 2,
            Error::Capacity { .. } => 4,
            Error::Sequencing(_) => 5,
            Error::Io(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Usage(msg.into()))
}

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
