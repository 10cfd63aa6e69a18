//! Line-delimited JSON dataset manifests.
//!
//! A manifest file starts with a header record
//! `{"schema_version":1,"metadata":{...}}` followed by one sample per line.
//! Serialization is canonical: saving the same manifest always produces the
//! same bytes, so files can be diffed and hashed.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sample::{ConceptFamily, ImageRecord, Sample, SampleLine, Split};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: duplicate sample_id `{sample_id}`")]
    DuplicateSampleId { line: usize, sample_id: String },
    #[error("line {line}: mask size {mask_h}x{mask_w} does not match image {image_h}x{image_w}")]
    DimensionMismatch {
        line: usize,
        mask_h: usize,
        mask_w: usize,
        image_h: u32,
        image_w: u32,
    },
    #[error("line {line}: invalid sample: {message}")]
    Invalid { line: usize, message: String },
    #[error("unsupported schema_version {0}")]
    UnsupportedSchema(u32),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema_version: u32,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub metadata: BTreeMap<String, String>,
    pub samples: Vec<Sample>,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        DatasetManifest {
            schema_version: SCHEMA_VERSION,
            metadata: BTreeMap::new(),
            samples: Vec::new(),
        }
    }
}

impl DatasetManifest {
    pub fn new(samples: Vec<Sample>) -> Self {
        DatasetManifest {
            samples,
            ..Default::default()
        }
    }

    pub fn with_metadata(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.metadata.insert(key.into(), value.into());
        self
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, sample_id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.sample_id == sample_id)
    }

    /// Checks manifest-wide invariants. Line numbers in errors assume the
    /// canonical layout (header on line 1).
    pub fn validate(&self) -> Result<(), ManifestError> {
        let mut checker = Checker::default();
        for (i, s) in self.samples.iter().enumerate() {
            checker.check(s, i + 2)?;
        }
        Ok(())
    }

    /// Canonical serialized bytes.
    pub fn to_jsonl(&self) -> String {
        let header = Header {
            schema_version: self.schema_version,
            metadata: self.metadata.clone(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for s in &self.samples {
            out.push_str(&serde_json::to_string(&SampleLine::from(s)).expect("sample serializes"));
            out.push('\n');
        }
        out
    }

    /// Parses manifest text. The header record is optional; line numbers in
    /// errors are physical (1-based) line numbers.
    pub fn from_jsonl(text: &str) -> Result<Self, ManifestError> {
        Self::from_lines(text.lines().map(|l| Ok::<_, std::io::Error>(l.to_string())), Path::new("<memory>"))
    }

    fn from_lines<I>(lines: I, path: &Path) -> Result<Self, ManifestError>
    where
        I: Iterator<Item = Result<String, std::io::Error>>,
    {
        let mut manifest = DatasetManifest::default();
        let mut checker = Checker::default();
        for (i, line) in lines.enumerate() {
            let line_no = i + 1;
            let line = line.map_err(|source| ManifestError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| ManifestError::Malformed {
                line: line_no,
                message: e.to_string(),
            })?;
            if line_no == 1 && value.get("schema_version").is_some() && value.get("sample_id").is_none() {
                let header: Header = serde_json::from_value(value).map_err(|e| ManifestError::Malformed {
                    line: line_no,
                    message: format!("bad header: {e}"),
                })?;
                if header.schema_version != SCHEMA_VERSION {
                    return Err(ManifestError::UnsupportedSchema(header.schema_version));
                }
                manifest.schema_version = header.schema_version;
                manifest.metadata = header.metadata;
                continue;
            }
            let record: SampleLine = serde_json::from_value(value).map_err(|e| ManifestError::Malformed {
                line: line_no,
                message: e.to_string(),
            })?;
            let sample = Sample::from(record);
            checker.check(&sample, line_no)?;
            manifest.samples.push(sample);
        }
        Ok(manifest)
    }
}

#[derive(Default)]
struct Checker {
    ids: HashSet<String>,
    images: HashMap<String, ImageRecord>,
}

impl Checker {
    fn check(&mut self, s: &Sample, line: usize) -> Result<(), ManifestError> {
        if !self.ids.insert(s.sample_id.clone()) {
            return Err(ManifestError::DuplicateSampleId {
                line,
                sample_id: s.sample_id.clone(),
            });
        }
        let [mask_h, mask_w] = s.mask.size;
        if mask_h != s.image.height as usize || mask_w != s.image.width as usize {
            return Err(ManifestError::DimensionMismatch {
                line,
                mask_h,
                mask_w,
                image_h: s.image.height,
                image_w: s.image.width,
            });
        }
        s.validate().map_err(|message| ManifestError::Invalid { line, message })?;
        // samples may share an image, but must agree on what it is
        match self.images.get(&s.image.image_id) {
            Some(prev) if prev != &s.image => Err(ManifestError::Invalid {
                line,
                message: format!("image `{}` redeclared with different uri or size", s.image.image_id),
            }),
            Some(_) => Ok(()),
            None => {
                self.images.insert(s.image.image_id.clone(), s.image.clone());
                Ok(())
            }
        }
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest, ManifestError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    DatasetManifest::from_lines(BufReader::new(file).lines(), path)
}

pub fn save_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<(), ManifestError> {
    let path = path.as_ref();
    let io_err = |source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    };
    manifest.validate()?;
    let file = fs::File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    w.write_all(manifest.to_jsonl().as_bytes()).map_err(io_err)?;
    w.flush().map_err(io_err)
}

/// Counts per split and concept plus prompt-length statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub total: usize,
    pub per_split: BTreeMap<Split, usize>,
    pub per_concept: BTreeMap<ConceptFamily, usize>,
    pub negatives: usize,
    /// Mean whitespace-delimited word count.
    pub prompt_word_mean: f64,
    /// Population standard deviation of the word count.
    pub prompt_word_std: f64,
}

pub fn manifest_stats(manifest: &DatasetManifest) -> SplitStats {
    let mut per_split = BTreeMap::new();
    let mut per_concept = BTreeMap::new();
    for s in &manifest.samples {
        *per_split.entry(s.split).or_insert(0) += 1;
        *per_concept.entry(s.concept).or_insert(0) += 1;
    }
    let n = manifest.samples.len();
    let (mean, std) = if n == 0 {
        (0.0, 0.0)
    } else {
        let words: Vec<f64> = manifest.samples.iter().map(|s| s.word_count() as f64).collect();
        let mean = words.iter().sum::<f64>() / n as f64;
        let var = words.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / n as f64;
        (mean, var.sqrt())
    };
    SplitStats {
        total: n,
        per_split,
        per_concept,
        negatives: manifest.samples.iter().filter(|s| s.is_negative).count(),
        prompt_word_mean: mean,
        prompt_word_std: std,
    }
}
