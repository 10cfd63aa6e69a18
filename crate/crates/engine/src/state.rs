//! Resumable run state: one marker file per completed (image, stage).
//!
//! A marker stores the stage's output and the audit records it produced, so a
//! resumed run replays finished stages without touching any backend. A marker
//! is honoured only when the markers of all earlier stages exist, and saving a
//! stage removes any later markers left from an older attempt.

use std::path::{Path, PathBuf};

use log::warn;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::audit::AuditRecord;
use crate::backends::sha256_hex;
use crate::error::{EngineError, Result};
use crate::fsutil::write_atomic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageMarker {
    Describe,
    Ground,
    /// Consistency verification together with refinement.
    Verify,
    Generate,
    Align,
    Negatives,
}

impl StageMarker {
    pub const ALL: [StageMarker; 6] = [
        StageMarker::Describe,
        StageMarker::Ground,
        StageMarker::Verify,
        StageMarker::Generate,
        StageMarker::Align,
        StageMarker::Negatives,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StageMarker::Describe => "describe",
            StageMarker::Ground => "ground",
            StageMarker::Verify => "verify",
            StageMarker::Generate => "generate",
            StageMarker::Align => "align",
            StageMarker::Negatives => "negatives",
        }
    }

    fn position(self) -> usize {
        StageMarker::ALL.iter().position(|m| *m == self).expect("listed")
    }

    pub fn predecessors(self) -> &'static [StageMarker] {
        &StageMarker::ALL[..self.position()]
    }

    pub fn successors(self) -> &'static [StageMarker] {
        &StageMarker::ALL[self.position() + 1..]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord<T> {
    pub output: T,
    pub audit: Vec<AuditRecord>,
}

#[derive(Serialize)]
struct StageRecordRef<'a, T> {
    output: &'a T,
    audit: &'a [AuditRecord],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct RunInfo {
    run_id: String,
    fingerprint: String,
    cache_dir: PathBuf,
}

/// Marker store for one run, rooted at `<out_dir>/state`.
#[derive(Debug, Clone)]
pub struct EngineRunState {
    pub run_id: String,
    pub cache_dir: PathBuf,
    root: PathBuf,
}

/// A directory name for an image id: the id itself when it is a plain file
/// name, otherwise a sanitized prefix plus a digest.
fn dir_name(image_id: &str) -> String {
    let plain = !image_id.is_empty()
        && !image_id.starts_with('.')
        && image_id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if plain {
        return image_id.to_string();
    }
    let safe: String = image_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .take(40)
        .collect();
    format!("{safe}-{}", &sha256_hex(image_id.as_bytes())[..16])
}

impl EngineRunState {
    /// Opens (or creates) the state under `root`. Existing state must come
    /// from the same run id and configuration fingerprint.
    pub fn open(root: &Path, run_id: &str, fingerprint: &str, cache_dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| EngineError::io(root, e))?;
        let info_path = root.join("run.json");
        let info = RunInfo {
            run_id: run_id.to_string(),
            fingerprint: fingerprint.to_string(),
            cache_dir: cache_dir.to_path_buf(),
        };
        match std::fs::read(&info_path) {
            Ok(bytes) => {
                let existing: RunInfo = serde_json::from_slice(&bytes)
                    .map_err(|e| EngineError::State(format!("{}: {e}", info_path.display())))?;
                if existing.run_id != info.run_id {
                    return Err(EngineError::Config(format!(
                        "{} holds run `{}`, not `{}`",
                        root.display(),
                        existing.run_id,
                        info.run_id
                    )));
                }
                if existing.fingerprint != info.fingerprint {
                    return Err(EngineError::Config(format!(
                        "{} was written with a different configuration; use a new output directory",
                        root.display()
                    )));
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                let bytes = serde_json::to_vec_pretty(&info).expect("run info serializes");
                write_atomic(&info_path, &bytes)?;
            }
            Err(e) => return Err(EngineError::io(&info_path, e)),
        }
        Ok(EngineRunState {
            run_id: run_id.to_string(),
            cache_dir: cache_dir.to_path_buf(),
            root: root.to_path_buf(),
        })
    }

    fn marker_path(&self, image_id: &str, marker: StageMarker) -> PathBuf {
        self.root.join(dir_name(image_id)).join(format!("{}.json", marker.as_str()))
    }

    fn exists(&self, image_id: &str, marker: StageMarker) -> bool {
        self.marker_path(image_id, marker).is_file()
    }

    /// The longest prefix of stages with markers present.
    pub fn completed(&self, image_id: &str) -> Vec<StageMarker> {
        StageMarker::ALL
            .into_iter()
            .take_while(|m| self.exists(image_id, *m))
            .collect()
    }

    pub fn is_complete(&self, image_id: &str) -> bool {
        self.completed(image_id).len() == StageMarker::ALL.len()
    }

    /// The stored record, if the marker and all its predecessors exist and
    /// the marker parses. An unreadable marker is treated as absent.
    pub fn load<T: DeserializeOwned>(&self, image_id: &str, marker: StageMarker) -> Result<Option<StageRecord<T>>> {
        if !marker.predecessors().iter().all(|m| self.exists(image_id, *m)) {
            return Ok(None);
        }
        let path = self.marker_path(image_id, marker);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(EngineError::io(&path, e)),
        };
        match serde_json::from_slice(&bytes) {
            Ok(r) => Ok(Some(r)),
            Err(e) => {
                warn!("ignoring unreadable marker {}: {e}", path.display());
                Ok(None)
            }
        }
    }

    pub fn save<T: Serialize>(&self, image_id: &str, marker: StageMarker, output: &T, audit: &[AuditRecord]) -> Result<()> {
        if let Some(missing) = marker.predecessors().iter().find(|m| !self.exists(image_id, **m)) {
            return Err(EngineError::State(format!(
                "cannot mark {} done for {image_id} before {}",
                marker.as_str(),
                missing.as_str()
            )));
        }
        for later in marker.successors() {
            let p = self.marker_path(image_id, *later);
            if p.exists() {
                std::fs::remove_file(&p).map_err(|e| EngineError::io(&p, e))?;
            }
        }
        let bytes = serde_json::to_vec(&StageRecordRef { output, audit }).expect("stage record serializes");
        write_atomic(&self.marker_path(image_id, marker), &bytes)
    }
}
