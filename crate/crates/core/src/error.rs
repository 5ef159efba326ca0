use std::path::PathBuf;

/// Errors produced anywhere in the training and evaluation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("vocabulary error: {0}")]
    Vocab(String),
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("invalid token id {0}")]
    InvalidId(u32),
    #[error("reward error: {0}")]
    Reward(String),
    #[error("consistency predictors are untrained")]
    Untrained,
    #[error("pool error: {0}")]
    Pool(String),
    #[error("non-finite loss at step {step}")]
    NonFinite { step: u64 },
    #[error("value {value} outside range [{min}, {max}]")]
    OutOfRange { value: f64, min: f64, max: f64 },
    #[error("statistics error: {0}")]
    Stats(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("unsupported format version {found} in {what} (expected {expected})")]
    Version {
        what: &'static str,
        found: u32,
        expected: u32,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
