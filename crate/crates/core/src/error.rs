use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corpus: {0}")]
    Corpus(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("archive: {0}")]
    Archive(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("config: {0}")]
    Config(String),

    #[error("stage `{stage}`{}: {source}", client.map(|c| format!(" (client {c})")).unwrap_or_default())]
    Stage {
        stage: String,
        client: Option<usize>,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn at_stage(self, stage: &str, client: Option<usize>) -> Self {
        Error::Stage { stage: stage.to_string(), client, source: Box::new(self) }
    }
}
