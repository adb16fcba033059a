use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("{path}:{line}: malformed record: {reason}")]
    MalformedRecord { path: PathBuf, line: usize, reason: String },

    #[error("no valid records in {}", .0.display())]
    NoRecords(PathBuf),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("degenerate covariance: rank {rank} < target dimension {target}")]
    DegenerateCovariance { rank: usize, target: usize },

    #[error("missing condition context: {0}")]
    MissingContext(&'static str),

    #[error("no condition vector for query {0:?}")]
    MissingCondition(String),

    #[error("stale {artifact}: recorded hash {expected}, current hash {found}")]
    HashMismatch {
        artifact: String,
        expected: String,
        found: String,
    },

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("workdir is locked by another process: {}", .0.display())]
    Locked(PathBuf),

    #[error("{artifact}: {source}")]
    Artifact {
        artifact: String,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub fn in_artifact(self, artifact: impl Into<String>) -> Self {
        Error::Artifact {
            artifact: artifact.into(),
            source: Box::new(self),
        }
    }

    /// Validation errors are problems with the inputs the user supplied,
    /// as opposed to failures while doing the work.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Artifact { source, .. } => source.is_validation(),
            Error::Io { .. } | Error::Json(_) => false,
            _ => true,
        }
    }
}
