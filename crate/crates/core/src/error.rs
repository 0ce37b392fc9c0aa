use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid document: {0}")]
    InvalidDocument(String),

    #[error("parse error in {path} at line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("malformed {what}: {message}")]
    Format { what: &'static str, message: String },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("search over an empty index")]
    EmptyIndex,

    #[error("sequence of {needed} tokens exceeds context window of {window}")]
    ContextOverflow { needed: usize, window: usize },

    #[error("invalid answer: {0}")]
    InvalidAnswer(String),

    #[error("malformed label mask: {0}")]
    Mask(String),

    #[error("all decodes produced empty output")]
    EmptyGeneration,

    #[error("retrieval required for category {0}")]
    RetrievalRequired(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("invalid mixture: {0}")]
    InvalidMixture(String),

    #[error("no eligible chunks: {0}")]
    NoEligibleChunks(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing artifact: {}", .0.display())]
    ArtifactMissing(PathBuf),

    #[error("stale index: encoder fingerprint does not match")]
    StaleIndex,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(what: &'static str, message: impl Into<String>) -> Self {
        Error::Format {
            what,
            message: message.into(),
        }
    }
}
