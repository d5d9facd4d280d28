use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("unknown {kind} id {id}")]
    Lookup { kind: &'static str, id: u64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("alignment error: point {index} (t={t}) is not within tolerance of the {interval}s grid")]
    Alignment { index: usize, t: i64, interval: i64 },

    #[error("no candidate road segment within {radius} m of point {index}")]
    Gap { index: usize, radius: f64 },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}; parameter norms: {norms}")]
    NonFinite { epoch: usize, batch: usize, norms: String },

    #[error("missing artifact {}: run `{producer}` first", path.display())]
    MissingArtifact { path: PathBuf, producer: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Data-integrity class errors (bad inputs rather than bad configuration).
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Integrity(_)
                | Error::Lookup { .. }
                | Error::Alignment { .. }
                | Error::Gap { .. }
                | Error::Checkpoint(_)
                | Error::Json(_)
        )
    }
}
