use thiserror::Error;

/// Errors produced by the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-canonical address {0:#018x}")]
    NonCanonical(u64),
    #[error("address {0:#018x} does not map a present kernel page")]
    NotPresent(u64),
    #[error("capability error: {0}")]
    Capability(String),
    #[error("backend error: {0}")]
    Backend(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
