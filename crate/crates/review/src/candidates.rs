//! Candidate records and their pre-rendered overlays.

use std::path::{Path, PathBuf};

use convseg_core::{rle_decode, DatasetManifest, Sample};
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::ReviewError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Accept,
    Reject,
}

impl Decision {
    pub fn as_str(self) -> &'static str {
        match self {
            Decision::Accept => "accept",
            Decision::Reject => "reject",
        }
    }
}

/// One line of a candidate file. Without an id the sample id is used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateLine {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate_id: Option<String>,
    pub ai_suggestion: Decision,
    pub sample: Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Candidate {
    pub candidate_id: String,
    pub sample: Sample,
    pub overlay_uri: PathBuf,
    pub plain_uri: PathBuf,
    pub ai_suggestion: Decision,
}

pub fn load_candidate_lines(path: &Path) -> Result<Vec<CandidateLine>, ReviewError> {
    let text = std::fs::read_to_string(path).map_err(|e| ReviewError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| ReviewError::Input(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Every sample of an engine manifest, each carrying the verifier's accept.
pub fn candidates_from_manifest(manifest: &DatasetManifest) -> Vec<CandidateLine> {
    manifest
        .samples
        .iter()
        .map(|s| CandidateLine {
            candidate_id: None,
            ai_suggestion: Decision::Accept,
            sample: s.clone(),
        })
        .collect()
}

const TINT: [u8; 3] = [255, 0, 255];

/// The image with the mask tinted half-way toward magenta and its boundary
/// drawn solid.
pub fn render_overlay(image: &RgbImage, sample: &Sample) -> Result<RgbImage, ReviewError> {
    let mask = rle_decode(&sample.mask).map_err(|e| ReviewError::Input(format!("{}: {e}", sample.sample_id)))?;
    let (w, h) = image.dimensions();
    if mask.dims() != (h as usize, w as usize) {
        return Err(ReviewError::Input(format!(
            "{}: mask is {}x{}, image is {h}x{w}",
            sample.sample_id,
            mask.height(),
            mask.width()
        )));
    }
    let mut out = image.clone();
    for y in 0..h as usize {
        for x in 0..w as usize {
            if !mask.get(y, x) {
                continue;
            }
            let edge = y == 0
                || x == 0
                || y + 1 == h as usize
                || x + 1 == w as usize
                || !mask.get(y - 1, x)
                || !mask.get(y + 1, x)
                || !mask.get(y, x - 1)
                || !mask.get(y, x + 1);
            let px = out.get_pixel_mut(x as u32, y as u32);
            if edge {
                *px = Rgb(TINT);
            } else {
                for (v, t) in px.0.iter_mut().zip(TINT) {
                    *v = ((*v as u16 + t as u16) / 2) as u8;
                }
            }
        }
    }
    Ok(out)
}

fn file_stem(position: usize, id: &str) -> String {
    let safe: String = id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .take(80)
        .collect();
    format!("{position:06}-{safe}")
}

/// Assigns ids, checks uniqueness and renders each overlay into
/// `<data_dir>/overlays/` unless it is already there.
pub fn prepare_candidates(lines: Vec<CandidateLine>, data_dir: &Path) -> Result<Vec<Candidate>, ReviewError> {
    let dir = data_dir.join("overlays");
    std::fs::create_dir_all(&dir).map_err(|e| ReviewError::io(&dir, e))?;
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.into_iter().enumerate() {
        let id = line.candidate_id.unwrap_or_else(|| line.sample.sample_id.clone());
        if !seen.insert(id.clone()) {
            return Err(ReviewError::Input(format!("duplicate candidate id `{id}`")));
        }
        let plain_uri = PathBuf::from(&line.sample.image.uri);
        let overlay_uri = dir.join(format!("{}.png", file_stem(i, &id)));
        if !overlay_uri.exists() {
            let image = image::open(&plain_uri)
                .map_err(|e| ReviewError::Input(format!("{}: {e}", plain_uri.display())))?
                .to_rgb8();
            let overlay = render_overlay(&image, &line.sample)?;
            overlay
                .save(&overlay_uri)
                .map_err(|e| ReviewError::Input(format!("{}: {e}", overlay_uri.display())))?;
        }
        out.push(Candidate {
            candidate_id: id,
            sample: line.sample,
            overlay_uri,
            plain_uri,
            ai_suggestion: line.ai_suggestion,
        });
    }
    Ok(out)
}
