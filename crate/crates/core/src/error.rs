use std::path::PathBuf;

use thiserror::Error;

use crate::corpus::ModelRole;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest {}: {message}", path.display())]
    Manifest { path: PathBuf, message: String },

    /// A store does not have the same number of lines as the corpus sources.
    #[error("line count mismatch: {} has {found} lines but {} has {expected}", file.display(), reference.display())]
    Alignment {
        file: PathBuf,
        found: usize,
        reference: PathBuf,
        expected: usize,
    },

    #[error("{}: invalid UTF-8 at byte offset {offset}", path.display())]
    Encoding { path: PathBuf, offset: usize },

    #[error("{}:{line}: malformed value {value:?}", path.display())]
    MalformedValue { path: PathBuf, line: usize, value: String },

    #[error("duplicate key {0}")]
    DuplicateKey(String),

    #[error("no translations loaded for role {0}")]
    MissingRole(ModelRole),

    #[error("no prefix decode for role {role} at fraction {fraction}")]
    MissingPrefix { role: ModelRole, fraction: f64 },

    #[error("unknown score {0:?}")]
    UnknownScore(String),

    #[error("record {index} out of range for a corpus of {n_records} records")]
    IndexOutOfRange { index: usize, n_records: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// The input admits no meaningful answer (empty groups, nothing qualifying, ...).
    #[error("{0}")]
    Degenerate(String),

    #[error("unknown metric {0:?}")]
    UnknownMetric(String),

    #[error("missing table cell ({pair}, {role}, {metric})")]
    MissingCell { pair: String, role: String, metric: String },

    #[error("record {index}: {message}")]
    Record { index: usize, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
