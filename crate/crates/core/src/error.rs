use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed JSON: {0}")]
    MalformedJson(String),

    #[error("schema violation: {0}")]
    SchemaViolation(String),

    #[error("dangling reference: {0}")]
    ReferenceError(String),

    #[error("duplicate id: {0}")]
    DuplicateId(String),

    #[error("category {category} has {available} instances, {k} requested")]
    InsufficientInstances { category: u64, available: usize, k: usize },

    #[error("unresolvable reference: {0}")]
    UnresolvableReference(String),

    #[error("no ground truth instances for this class")]
    NoGroundTruth,

    #[error("category conflict: {0}")]
    CategoryConflict(String),

    #[error("backend failed ({}){}", code.map_or("no exit code".to_string(), |c| format!("exit code {c}")), if stderr.is_empty() { String::new() } else { format!(": {}", stderr.trim_end()) })]
    BackendFailure { code: Option<i32>, stderr: String },

    #[error("backend timed out after {0:?}")]
    Timeout(std::time::Duration),

    #[error("no prediction file for round {round} at {}", path.display())]
    MissingPredictionFile { round: u32, path: PathBuf },

    #[error("malformed predictions: {0}")]
    MalformedPredictions(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the CLI for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::BackendFailure { .. }
            | Error::Timeout(_)
            | Error::MissingPredictionFile { .. } => 2,
            Error::InvalidConfig(_) => 3,
            _ => 1,
        }
    }
}
