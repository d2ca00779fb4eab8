use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus: cannot build a vocabulary")]
    EmptyCorpus,
    #[error("need at least {needed} cases, got {got}")]
    TooFewCases { needed: usize, got: usize },
    #[error("duplicate case id {0}")]
    DuplicateCase(String),
    #[error("cannot resolve image reference: {0}")]
    UnresolvableRef(String),
    #[error("backend mismatch: {0}")]
    BackendMismatch(String),
    #[error("backend `{0}` is not available in this build")]
    BackendUnavailable(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("unknown {kind} `{value}`")]
    Unknown { kind: &'static str, value: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("malformed manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
