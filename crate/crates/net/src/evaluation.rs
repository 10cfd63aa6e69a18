//! Benchmark evaluation: run a model over a manifest, binarize, score.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use convseg_core::{per_concept_report, rle_decode, rle_encode, BinaryMask, ConceptReport, DatasetManifest, EvalPair, MaskRle};
use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{NetError, Result};
use crate::model::SegModel;
use crate::preprocess::load_rgb;
use crate::train::resolve;

pub const DEFAULT_THRESHOLD: f32 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub model_id: String,
    pub threshold: f32,
    pub entries: BTreeMap<String, MaskRle>,
    /// Samples whose prediction failed; their entry is an empty mask.
    #[serde(default)]
    pub errors: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictionHeader {
    model_id: String,
    threshold: f32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictionLine {
    sample_id: String,
    mask_rle: MaskRle,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

impl PredictionSet {
    /// Header line followed by one entry per line, in sample-id order.
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&PredictionHeader {
            model_id: self.model_id.clone(),
            threshold: self.threshold,
        })
        .expect("header serializes");
        out.push('\n');
        for (id, rle) in &self.entries {
            let line = PredictionLine {
                sample_id: id.clone(),
                mask_rle: rle.clone(),
                error: self.errors.get(id).cloned(),
            };
            out.push_str(&serde_json::to_string(&line).expect("entry serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines
            .next()
            .ok_or_else(|| NetError::Evaluation("predictions file is empty".into()))?;
        let header: PredictionHeader =
            serde_json::from_str(first).map_err(|e| NetError::Evaluation(format!("line 1: {e}")))?;
        let mut set = PredictionSet {
            model_id: header.model_id,
            threshold: header.threshold,
            entries: BTreeMap::new(),
            errors: BTreeMap::new(),
        };
        for (i, line) in lines {
            let entry: PredictionLine =
                serde_json::from_str(line).map_err(|e| NetError::Evaluation(format!("line {}: {e}", i + 1)))?;
            if set.entries.contains_key(&entry.sample_id) {
                return Err(NetError::Evaluation(format!(
                    "line {}: duplicate sample_id {}",
                    i + 1,
                    entry.sample_id
                )));
            }
            if let Some(e) = entry.error {
                set.errors.insert(entry.sample_id.clone(), e);
            }
            set.entries.insert(entry.sample_id, entry.mask_rle);
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_jsonl())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| NetError::io(path, e))?;
        Self::from_jsonl(&text)
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| NetError::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| NetError::io(path, e))
}

/// Predicts every sample; per-sample failures become empty masks with an
/// error entry instead of aborting the run.
pub fn predict_dataset(
    model: &SegModel,
    manifest: &DatasetManifest,
    threshold: f32,
    image_root: Option<&Path>,
    model_id: &str,
) -> PredictionSet {
    model.set_embedding_cache(true);
    let mut set = PredictionSet {
        model_id: model_id.to_string(),
        threshold,
        entries: BTreeMap::new(),
        errors: BTreeMap::new(),
    };
    let mut images: BTreeMap<String, std::result::Result<_, String>> = BTreeMap::new();
    for s in &manifest.samples {
        let (h, w) = (s.image.height as usize, s.image.width as usize);
        let prepared = images
            .entry(s.image.uri.clone())
            .or_insert_with(|| {
                load_rgb(&resolve(image_root, &s.image.uri))
                    .map(|img| model.prepare(&img))
                    .map_err(|e| e.to_string())
            })
            .clone();
        let result = prepared.and_then(|p| {
            if (p.orig_h, p.orig_w) != (h, w) {
                return Err(format!("image is {}x{}, manifest says {h}x{w}", p.orig_h, p.orig_w));
            }
            model
                .predict_prepared(&p, &s.prompt)
                .map(|probs| probs.threshold(threshold))
                .map_err(|e| e.to_string())
        });
        let mask = match result {
            Ok(m) => m,
            Err(e) => {
                warn!("prediction failed for {}: {e}", s.sample_id);
                set.errors.insert(s.sample_id.clone(), e);
                BinaryMask::zeros(h, w)
            }
        };
        set.entries.insert(s.sample_id.clone(), rle_encode(&mask));
    }
    model.set_embedding_cache(false);
    set
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub model_id: String,
    pub threshold: f32,
    /// Every sample, negatives scored as empty-mask targets.
    pub with_negatives: ConceptReport,
    /// Positive samples only; absent when the manifest has none.
    pub positives_only: Option<ConceptReport>,
    /// Samples with no prediction, scored as empty masks.
    pub missing: Vec<String>,
    pub prediction_errors: usize,
}

impl EvaluationReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "model: {}  threshold: {}", self.model_id, self.threshold);
        let _ = writeln!(out, "\nwith negatives\n{}", self.with_negatives.to_table());
        if let Some(p) = &self.positives_only {
            let _ = writeln!(out, "positives only\n{}", p.to_table());
        }
        if !self.missing.is_empty() {
            let _ = writeln!(out, "missing predictions: {}", self.missing.len());
        }
        if self.prediction_errors > 0 {
            let _ = writeln!(out, "prediction errors: {}", self.prediction_errors);
        }
        out
    }

    /// Writes `report.json` and `report.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| NetError::Evaluation(e.to_string()))?;
        write_file(&dir.join("report.json"), &(json + "\n"))?;
        write_file(&dir.join("report.txt"), &self.to_text())
    }
}

pub fn evaluate_predictions(preds: &PredictionSet, manifest: &DatasetManifest) -> Result<EvaluationReport> {
    if let Some(extra) = preds.entries.keys().find(|id| manifest.get(id).is_none()) {
        return Err(NetError::Evaluation(format!("prediction for unknown sample {extra}")));
    }
    let mut pairs = Vec::with_capacity(manifest.len());
    let mut missing = Vec::new();
    for s in &manifest.samples {
        let gt = rle_decode(&s.mask)?;
        let pred = match preds.entries.get(&s.sample_id) {
            Some(rle) => rle_decode(rle)?,
            None => {
                warn!("no prediction for {}, scoring as empty", s.sample_id);
                missing.push(s.sample_id.clone());
                BinaryMask::zeros(gt.height(), gt.width())
            }
        };
        pairs.push((s.is_negative, EvalPair {
            sample_id: s.sample_id.clone(),
            concept: s.concept,
            gt,
            pred,
        }));
    }
    let all: Vec<EvalPair> = pairs.iter().map(|(_, p)| p.clone()).collect();
    let positives: Vec<EvalPair> = pairs.into_iter().filter(|(neg, _)| !neg).map(|(_, p)| p).collect();
    Ok(EvaluationReport {
        model_id: preds.model_id.clone(),
        threshold: preds.threshold,
        with_negatives: per_concept_report(&all)?,
        positives_only: if positives.is_empty() {
            None
        } else {
            Some(per_concept_report(&positives)?)
        },
        missing,
        prediction_errors: preds.errors.len(),
    })
}

#[cfg(test)]
mod tests {
    use convseg_core::{ConceptFamily, ImageRecord, Provenance, Sample, Split};

    use super::*;

    fn manifest() -> DatasetManifest {
        let mk = |id: &str, concept, bits: &[bool], neg| Sample {
            sample_id: id.into(),
            image: ImageRecord {
                image_id: "i".into(),
                uri: "missing.png".into(),
                width: 2,
                height: 2,
            },
            prompt: "p".into(),
            mask: rle_encode(&BinaryMask::from_bits(2, 2, bits.to_vec())),
            concept,
            split: Split::HumanAnnotated,
            provenance: Provenance::SyntheticTest,
            is_negative: neg,
        };
        DatasetManifest::new(vec![
            mk("a", ConceptFamily::Entities, &[true, false, false, false], false),
            mk("b", ConceptFamily::SpatialLayout, &[true, true, false, false], false),
            mk("c", ConceptFamily::AffordancesFunctions, &[false; 4], true),
        ])
    }

    fn preds_from(m: &DatasetManifest, f: impl Fn(&Sample) -> MaskRle) -> PredictionSet {
        PredictionSet {
            model_id: "t".into(),
            threshold: 0.5,
            entries: m.samples.iter().map(|s| (s.sample_id.clone(), f(s))).collect(),
            errors: BTreeMap::new(),
        }
    }

    #[test]
    fn perfect_predictions_score_100() {
        let m = manifest();
        let r = evaluate_predictions(&preds_from(&m, |s| s.mask.clone()), &m).unwrap();
        assert_eq!(r.with_negatives.overall_giou, 100.0);
        assert!(r.with_negatives.per_concept_giou.values().all(|&v| v == 100.0));
        assert_eq!(r.positives_only.as_ref().unwrap().n_total, 2);
    }

    #[test]
    fn empty_predictions_on_positives_score_zero() {
        let m = manifest();
        let r = evaluate_predictions(&preds_from(&m, |_| MaskRle::empty(2, 2)), &m).unwrap();
        assert_eq!(r.positives_only.unwrap().overall_giou, 0.0);
        // the negative sample is correct
        assert!((r.with_negatives.overall_giou - 100.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn missing_and_unknown_predictions() {
        let m = manifest();
        let mut p = preds_from(&m, |s| s.mask.clone());
        p.entries.remove("b");
        let r = evaluate_predictions(&p, &m).unwrap();
        assert_eq!(r.missing, vec!["b".to_string()]);
        p.entries.insert("zzz".into(), MaskRle::empty(2, 2));
        assert!(evaluate_predictions(&p, &m).is_err());
    }

    #[test]
    fn jsonl_round_trip_and_repeatable_reports() {
        let m = manifest();
        let mut p = preds_from(&m, |s| s.mask.clone());
        p.errors.insert("c".into(), "unreadable".into());
        let back = PredictionSet::from_jsonl(&p.to_jsonl()).unwrap();
        assert_eq!(back, p);
        assert_eq!(evaluate_predictions(&p, &m).unwrap(), evaluate_predictions(&back, &m).unwrap());
    }

    #[test]
    fn unreadable_images_become_empty_predictions() {
        let cfg = crate::ModelConfig {
            image_size: 32,
            patch_stride: 8,
            d_img: 8,
            d_dec: 16,
            d_t: 8,
            image_heads: 2,
            prompt_layers: 1,
            prompt_heads: 2,
            decoder_heads: 2,
            lora_rank: 2,
            max_text_tokens: 16,
            ..crate::ModelConfig::tiny()
        };
        let model = SegModel::new(cfg, candle_core::DType::F32, candle_core::Device::Cpu).unwrap();
        let m = manifest();
        let p = predict_dataset(&model, &m, 0.5, None, "x");
        assert_eq!(p.entries.len(), 3);
        assert_eq!(p.errors.len(), 3);
        assert!(p.entries.values().all(|r| r.foreground_count() == 0));
    }
}
