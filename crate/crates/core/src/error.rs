use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad error families, used by the command line runner to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Training,
    Dependency,
    Other,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Other => 1,
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Training => 4,
            ErrorClass::Dependency => 5,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: item `{item}` has no catalog entry")]
    Referential {
        path: PathBuf,
        line: usize,
        item: String,
    },

    #[error("filtering removed every event")]
    EmptyDataset,

    #[error("sequence of user `{user}` has {len} items; a leave-one-out split needs at least 3")]
    Split { user: String, len: usize },

    #[error("user `{user}` has interacted with every item; no negative can be sampled")]
    NoNegative { user: String },

    #[error("cannot partition items: {0}")]
    Partition(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("unknown item `{0}`")]
    UnknownItem(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{stage} training diverged at epoch {epoch}{}: {message}", batch.map(|b| format!(", batch {b}")).unwrap_or_default())]
    Training {
        stage: &'static str,
        epoch: usize,
        batch: Option<usize>,
        message: String,
    },

    #[error("no fixture for user `{user}` and item `{item}`")]
    MissingFixture { user: String, item: String },

    #[error("generation transport failed after {retries} retries: {message}")]
    Transport { retries: usize, message: String },

    #[error("malformed generation response: {0}")]
    Response(String),

    #[error("token `{0}` is not in the vocabulary")]
    Vocabulary(String),

    #[error("coverage is undefined for an empty record set")]
    CoverageUndefined,

    #[error("empty cohort: {0}")]
    EmptyCohort(String),

    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("stage `{stage}` requires `{prerequisite}`; run it first")]
    Dependency { stage: String, prerequisite: String },

    #[error("refusing to overwrite {0} with different content (pass --force)")]
    Overwrite(PathBuf),

    #[error("output directory is locked by another run: {0}")]
    Locked(PathBuf),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config { .. } => ErrorClass::Config,
            Error::Training { .. } => ErrorClass::Training,
            Error::Dependency { .. } => ErrorClass::Dependency,
            Error::Parse { .. }
            | Error::Referential { .. }
            | Error::EmptyDataset
            | Error::Split { .. }
            | Error::NoNegative { .. }
            | Error::Partition(_)
            | Error::UnknownItem(_)
            | Error::Data(_)
            | Error::MissingFixture { .. }
            | Error::Vocabulary(_)
            | Error::CoverageUndefined
            | Error::EmptyCohort(_) => ErrorClass::Data,
            Error::Io { .. }
            | Error::Contract(_)
            | Error::Transport { .. }
            | Error::Response(_)
            | Error::Overwrite(_)
            | Error::Locked(_) => ErrorClass::Other,
        }
    }
}
