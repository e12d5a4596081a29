use thiserror::Error;

/// Error categories shared by every module. Each maps to a distinct CLI exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
    /// A replay disagreed with the digests recorded in a run manifest.
    #[error("verification failed: {0}")]
    Verification(String),
}

impl Error {
    /// Process exit code for this category: 2 usage, 3 config validation,
    /// 4 numeric failure, 5 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 2,
            Error::Config(_) | Error::Domain(_) | Error::Index(_) | Error::Shape(_) => 3,
            Error::Numeric(_) => 4,
            Error::Io(_) | Error::Format(_) | Error::Verification(_) => 5,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
