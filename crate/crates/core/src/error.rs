use std::path::PathBuf;

use thiserror::Error;

use crate::backend::BackendError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}:{line}: malformed record: {source}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },

    #[error("instance `{id}`: {reason}")]
    Validation { id: String, reason: String },

    #[error("invalid label space: {0}")]
    LabelSpace(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("infeasible sampling plan: {0}")]
    Infeasible(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("prompt assembly: {0}")]
    Assembly(String),

    #[error("retrieval: {0}")]
    Retrieval(String),

    #[error("distribution: {0}")]
    Distribution(String),

    #[error("metrics: {0}")]
    Metrics(String),

    #[error(transparent)]
    Backend(#[from] BackendError),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

/// Coarse failure class, used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Backend,
    Data,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn validation(id: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            id: id.into(),
            reason: reason.into(),
        }
    }

    /// Wraps the error with the pipeline stage it came from.
    pub fn at_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::LabelSpace(_) | Error::Template(_) => ErrorClass::Config,
            Error::Backend(_) => ErrorClass::Backend,
            Error::Stage { source, .. } => source.class(),
            _ => ErrorClass::Data,
        }
    }
}
