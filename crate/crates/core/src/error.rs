use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

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

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("coverage error: {0}")]
    Coverage(String),

    #[error("degenerate batch: every anchor lacks a positive")]
    DegenerateBatch,

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("class {0} was never seen (zero prototype)")]
    ClassNeverSeen(String),

    #[error("plan error: {0}")]
    Plan(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("stage `{stage}` requires missing artifact {path}")]
    Dependency { stage: &'static str, path: PathBuf },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
