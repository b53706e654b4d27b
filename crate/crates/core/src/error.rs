use std::path::PathBuf;

use thiserror::Error;

use crate::dsl::ParseError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(#[from] ParseError),

    #[error("token id {id} outside vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("sequence of {len} tokens exceeds context window of {max}")]
    ContextOverflow { len: usize, max: usize },

    #[error("non-finite value in {location}")]
    NonFinite { location: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("group buffer: {0}")]
    Buffer(String),

    #[error("search: {0}")]
    Search(String),

    #[error("weight checksum mismatch: expected {expected}, found {found}")]
    Checksum { expected: String, found: String },

    #[error("snapshot format: {0}")]
    Snapshot(String),

    #[error("replay diverged at event {index}: expected {expected}, got {actual}")]
    ReplayDivergence {
        index: usize,
        expected: String,
        actual: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("task generation failed after {attempts} attempts (difficulty {difficulty})")]
    Generation { attempts: usize, difficulty: u8 },

    #[error("{0}")]
    Other(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
