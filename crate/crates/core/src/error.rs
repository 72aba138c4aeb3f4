use thiserror::Error;

/// Errors surfaced by the estimation library.
#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on a domain quantity was violated.
    #[error("domain error: {0}")]
    Domain(String),

    /// A numerical routine failed to converge or left its valid range.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Sampler diagnostics failed hard (e.g. all-divergent warmup).
    #[error("diagnostic failure: {0}")]
    Diagnostic(String),

    /// Malformed or unreadable input data.
    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
