use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed triple: {reason}")]
    KgParse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("{path}: knowledge graph contains no triples")]
    EmptyKg { path: PathBuf },

    #[error("triple position {position} out of range for a graph of {k} triples")]
    TripleIndex { position: usize, k: usize },

    #[error("team {team}: {k} triples exceed the model limit of {k_max}")]
    KgTooLarge { team: String, k: usize, k_max: usize },

    #[error("{path}:{line}: dialogue {id}: {reason}")]
    DialogueParse {
        path: PathBuf,
        line: usize,
        id: String,
        reason: String,
    },

    #[error("{path}:{line}: embedding file: {reason}")]
    EmbeddingFormat {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("no knowledge graph loaded for team {0:?}")]
    UnknownTeam(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("vocabulary hash mismatch: checkpoint has {expected}, corpus gives {found}")]
    VocabularyMismatch { expected: String, found: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
