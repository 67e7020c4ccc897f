use std::path::PathBuf;

/// Error type shared by every stage of the lab.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("malformed sequence: {0}")]
    MalformedSequence(String),
    #[error("injection error: {0}")]
    Injection(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
    #[error("internal error: {0}")]
    Internal(String),
    #[error("schema version mismatch in {what}: found {found}, expected {expected}")]
    SchemaVersion {
        what: String,
        found: u32,
        expected: u32,
    },
    #[error("provenance mismatch in {path}: file hash {found}, config hash {expected}")]
    Provenance {
        path: PathBuf,
        found: String,
        expected: String,
    },
    #[error("missing input artifact: {0}")]
    MissingInput(PathBuf),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
