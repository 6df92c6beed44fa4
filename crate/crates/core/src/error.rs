use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("empty split: {0}")]
    EmptySplit(String),

    #[error("invalid labels: {0}")]
    Labels(String),

    #[error("manifest {path}, row {row}: {message}")]
    Manifest {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("manifest {path}: missing required column `{column}`")]
    MissingColumn { path: PathBuf, column: String },

    #[error("feature format error: {0}")]
    Format(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("training diverged: non-finite loss in task {task}")]
    Diverged { task: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("fingerprint mismatch: checkpoint {found}, expected {expected}")]
    Fingerprint { expected: String, found: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
