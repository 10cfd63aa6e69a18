use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::candidates::Decision;

#[derive(Debug, Error)]
pub enum ReviewError {
    #[error("unknown candidate `{0}`")]
    UnknownCandidate(String),
    #[error("candidate `{candidate_id}` already decided ({existing}) by `{annotator_id}`", existing = .existing.as_str())]
    Conflict {
        candidate_id: String,
        existing: Decision,
        annotator_id: String,
    },
    #[error("candidate `{candidate_id}` is not assigned to `{annotator_id}`")]
    NotAssigned { candidate_id: String, annotator_id: String },
    #[error("session id must not be empty")]
    EmptySession,
    #[error("no decided candidates")]
    NoDecisions,
    #[error("{0}")]
    Input(String),
    #[error("verdict log {path} line {line}: {message}")]
    Log { path: PathBuf, line: usize, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Manifest(#[from] convseg_core::ManifestError),
}

impl ReviewError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        ReviewError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
