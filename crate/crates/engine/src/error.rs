use std::path::{Path, PathBuf};

use convseg_core::{ManifestError, MaskError};
use thiserror::Error;

use crate::templates::TemplateError;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("run cancelled")]
    Cancelled,
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("run state: {0}")]
    State(String),
}

impl EngineError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        EngineError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T, E = EngineError> = std::result::Result<T, E>;
