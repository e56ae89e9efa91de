use std::path::PathBuf;

use layergan_autograd::TensorError;
use thiserror::Error;

use crate::checkpoint::CheckpointError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {msg}", path.display())]
    Png { path: PathBuf, msg: String },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{}:{line}: {msg}", path.display())]
    Manifest { path: PathBuf, line: usize, msg: String },
    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("could not place an instance of class {class} ({name}) after {attempts} attempts")]
    Placement {
        class: usize,
        name: String,
        attempts: usize,
    },
    #[error("class {class} has no {which} training images")]
    DegenerateDomain { class: usize, which: &'static str },
    #[error("non-finite value in {term} (class {class})")]
    NonFinite { term: &'static str, class: usize },
    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
