//! Runs the stages over a set of images with bounded parallelism, resumable
//! state and deterministic outputs.
//!
//! Output files under `out_dir`: `manifest.jsonl` (emitted samples),
//! `audit.jsonl` (one record per dropped, rejected or flagged item),
//! `regions.jsonl` (every grounded region with its verdicts), `summary.json`,
//! plus the resolved `config.json` and `images.jsonl` used by resume. The
//! first three are assembled in input order, so they do not depend on
//! scheduling.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use convseg_core::{load_manifest, rle_decode, ConceptFamily, DatasetManifest, ImageRecord, Sample};
use log::{info, warn};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::audit::{audit_jsonl, Action, AuditLog, AuditRecord, Reason, Stage};
use crate::backends::{sha256_hex, BackendConfig, Backends, ImageInput, Verdict};
use crate::cache::{CallCache, CallControl, CallStats};
use crate::error::{EngineError, Result};
use crate::fsutil::write_atomic;
use crate::stages::{
    generate_negatives, positive_sample, seeded_regions, stage1_describe, stage2_ground, stage3_refine,
    stage3_verify, stage4_generate, stage5_align, union_mask, Services, StageParams,
};
use crate::state::{EngineRunState, StageMarker};
use crate::templates::{TemplateKind, TemplateRegistry};
use crate::types::{CandidatePrompt, GroundedRegion, RegionDescription};

fn default_workers() -> usize {
    1
}

fn all_concepts() -> Vec<ConceptFamily> {
    ConceptFamily::ALL.to_vec()
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    pub run_id: String,
    pub out_dir: PathBuf,
    /// Defaults to `<out_dir>/cache`.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "all_concepts")]
    pub concepts: Vec<ConceptFamily>,
    #[serde(default)]
    pub stages: StageParams,
    #[serde(default = "yes")]
    pub negatives: bool,
    /// Manifest of seed masks; when set, description and grounding are
    /// replaced by the seeds of each image.
    #[serde(default)]
    pub seed_masks: Option<PathBuf>,
    /// Whether seed masks also go through boundary refinement.
    #[serde(default)]
    pub refine_seed_masks: bool,
    /// Overrides for the built-in templates.
    #[serde(default)]
    pub templates_dir: Option<PathBuf>,
    pub vlm: BackendConfig,
    pub detector: BackendConfig,
    pub segmenter: BackendConfig,
}

impl EngineConfig {
    /// A configuration over the seeded synthetic backends.
    pub fn synthetic(run_id: impl Into<String>, out_dir: impl Into<PathBuf>, seed: u64) -> Self {
        EngineConfig {
            run_id: run_id.into(),
            out_dir: out_dir.into(),
            cache_dir: None,
            workers: 1,
            concepts: all_concepts(),
            stages: StageParams {
                seed: Some(seed),
                ..StageParams::default()
            },
            negatives: true,
            seed_masks: None,
            refine_seed_masks: false,
            templates_dir: None,
            vlm: BackendConfig::mock(seed),
            detector: BackendConfig::mock(seed),
            segmenter: BackendConfig::mock(seed),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| EngineError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| EngineError::Config(format!("{}: {e}", path.display())))
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir.clone().unwrap_or_else(|| self.out_dir.join("cache"))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(EngineError::Config(m));
        if self.run_id.trim().is_empty() {
            return bad("run_id must not be empty".into());
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if self.concepts.is_empty() {
            return bad("at least one concept is required".into());
        }
        self.stages.validate().map_err(EngineError::Config)?;
        for (name, b) in [("vlm", &self.vlm), ("detector", &self.detector), ("segmenter", &self.segmenter)] {
            b.validate().map_err(|e| EngineError::Config(format!("{name}: {e}")))?;
        }
        Ok(())
    }

    pub fn templates(&self) -> Result<TemplateRegistry> {
        let reg = match &self.templates_dir {
            Some(dir) => TemplateRegistry::from_dir(dir)?,
            None => TemplateRegistry::defaults(),
        };
        reg.validate()?;
        Ok(reg)
    }

    /// Digest of everything that affects outputs; parallelism and paths are
    /// excluded.
    fn fingerprint(&self, templates: &TemplateRegistry) -> String {
        let mut texts = Vec::new();
        for kind in TemplateKind::ALL {
            let concepts: Vec<Option<ConceptFamily>> = if kind.is_per_concept() {
                ConceptFamily::ALL.iter().copied().map(Some).collect()
            } else {
                vec![None]
            };
            for c in concepts {
                if let Ok(t) = templates.get(c, kind) {
                    texts.push(t.text.clone());
                }
            }
        }
        let value = serde_json::json!({
            "concepts": self.concepts,
            "stages": self.stages,
            "negatives": self.negatives,
            "seed_masks": self.seed_masks,
            "refine_seed_masks": self.refine_seed_masks,
            "vlm": self.vlm,
            "detector": self.detector,
            "segmenter": self.segmenter,
            "templates": texts,
        });
        sha256_hex(value.to_string().as_bytes())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub images: usize,
    pub images_failed: usize,
    pub images_low_yield: usize,
    pub regions_accepted: usize,
    pub positives: usize,
    pub negatives: usize,
    pub removed_by_reason: BTreeMap<String, usize>,
    /// Calls made by this invocation only; varies with how much was cached.
    pub calls: CallStats,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub manifest: DatasetManifest,
    pub audit: Vec<AuditRecord>,
    pub regions: Vec<GroundedRegion>,
    pub summary: RunSummary,
}

#[derive(Debug, Default)]
struct ImageOutcome {
    samples: Vec<Sample>,
    audit: Vec<AuditRecord>,
    regions: Vec<GroundedRegion>,
    failed: bool,
}

pub struct Pipeline {
    cfg: EngineConfig,
    services: Services,
    seeds: Option<BTreeMap<String, Vec<Sample>>>,
    fingerprint: String,
}

impl Pipeline {
    pub fn new(cfg: EngineConfig) -> Result<Self> {
        cfg.validate()?;
        let backends =
            Backends::from_configs(cfg.vlm.clone(), cfg.detector.clone(), cfg.segmenter.clone()).map_err(EngineError::Config)?;
        Self::with_backends(cfg, backends)
    }

    /// Uses the given backends instead of the ones the configuration names.
    pub fn with_backends(cfg: EngineConfig, backends: Backends) -> Result<Self> {
        cfg.validate()?;
        let templates = cfg.templates()?;
        let fingerprint = cfg.fingerprint(&templates);
        let seeds = match &cfg.seed_masks {
            Some(path) => {
                let m = load_manifest(path)?;
                let mut by_image: BTreeMap<String, Vec<Sample>> = BTreeMap::new();
                for s in m.samples.into_iter().filter(|s| !s.is_negative) {
                    by_image.entry(s.image.image_id.clone()).or_default().push(s);
                }
                Some(by_image)
            }
            None => None,
        };
        let cache = CallCache::new(cfg.cache_dir());
        let services = Services::new(backends, templates, cfg.stages, Some(cache));
        Ok(Pipeline {
            cfg,
            services,
            seeds,
            fingerprint,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    /// Cancelling stops the run at the next uncached backend call; finished
    /// stages stay recorded for resume.
    pub fn control(&self) -> Arc<CallControl> {
        self.services.control()
    }

    pub fn run(&self, images: &[ImageRecord]) -> Result<RunOutput> {
        self.run_with_progress(images, &|_, _| {})
    }

    /// Like [`Pipeline::run`], calling `progress(position, image_id)` as each
    /// image finishes.
    pub fn run_with_progress(
        &self,
        images: &[ImageRecord],
        progress: &(dyn Fn(usize, &str) + Sync),
    ) -> Result<RunOutput> {
        let out = &self.cfg.out_dir;
        std::fs::create_dir_all(out).map_err(|e| EngineError::io(out, e))?;
        let state = EngineRunState::open(&out.join("state"), &self.cfg.run_id, &self.fingerprint, &self.cfg.cache_dir())?;
        let config_json = serde_json::to_vec_pretty(&self.cfg).expect("config serializes");
        write_atomic(&out.join("config.json"), &config_json)?;
        write_atomic(&out.join("images.jsonl"), images_jsonl(images).as_bytes())?;
        info!("engine run {}: {} images, {} workers", self.cfg.run_id, images.len(), self.cfg.workers);

        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.cfg.workers)
            .build()
            .map_err(|e| EngineError::Config(format!("thread pool: {e}")))?;
        let results: Vec<Result<ImageOutcome>> = pool.install(|| {
            images
                .par_iter()
                .enumerate()
                .map(|(i, rec)| {
                    let r = self.process_image(&state, rec);
                    if r.is_ok() {
                        progress(i, &rec.image_id);
                    }
                    r
                })
                .collect()
        });

        let mut outcomes = Vec::with_capacity(results.len());
        for r in results {
            outcomes.push(r?);
        }
        let output = self.assemble(outcomes);
        write_atomic(&out.join("manifest.jsonl"), output.manifest.to_jsonl().as_bytes())?;
        write_atomic(&out.join("audit.jsonl"), audit_jsonl(&output.audit).as_bytes())?;
        write_atomic(&out.join("regions.jsonl"), regions_jsonl(&output.regions).as_bytes())?;
        let summary_json = serde_json::to_vec_pretty(&output.summary).expect("summary serializes");
        write_atomic(&out.join("summary.json"), &summary_json)?;
        info!(
            "engine run {}: {} positives, {} negatives, {} backend calls, {} cache hits",
            self.cfg.run_id,
            output.summary.positives,
            output.summary.negatives,
            output.summary.calls.backend_calls(),
            output.summary.calls.cache_hits
        );
        Ok(output)
    }

    fn assemble(&self, outcomes: Vec<ImageOutcome>) -> RunOutput {
        let mut summary = RunSummary {
            run_id: self.cfg.run_id.clone(),
            images: outcomes.len(),
            ..RunSummary::default()
        };
        let mut samples = Vec::new();
        let mut audit = Vec::new();
        let mut regions = Vec::new();
        for o in outcomes {
            summary.images_failed += o.failed as usize;
            summary.images_low_yield += o.audit.iter().any(|r| r.reason == Reason::LowYield) as usize;
            summary.regions_accepted += o.regions.iter().filter(|r| r.is_accepted()).count();
            for r in o.audit.iter().filter(|r| r.action.removes_item()) {
                *summary.removed_by_reason.entry(r.reason.as_str()).or_default() += 1;
            }
            samples.extend(o.samples);
            audit.extend(o.audit);
            regions.extend(o.regions);
        }
        summary.negatives = samples.iter().filter(|s| s.is_negative).count();
        summary.positives = samples.len() - summary.negatives;
        summary.calls = self.services.stats();
        let manifest = DatasetManifest::new(samples).with_metadata("engine_run", self.cfg.run_id.clone());
        RunOutput {
            manifest,
            audit,
            regions,
            summary,
        }
    }

    /// Replays a recorded stage or runs it and records the result.
    fn stage<T: Serialize + DeserializeOwned>(
        &self,
        state: &EngineRunState,
        image_id: &str,
        marker: StageMarker,
        audit: &mut AuditLog,
        run: impl FnOnce(&mut AuditLog) -> Result<T>,
    ) -> Result<T> {
        if let Some(rec) = state.load::<T>(image_id, marker)? {
            audit.extend(rec.audit);
            return Ok(rec.output);
        }
        let mut local = AuditLog::default();
        let out = run(&mut local)?;
        state.save(image_id, marker, &out, &local.records)?;
        audit.extend(local.records);
        Ok(out)
    }

    fn process_image(&self, state: &EngineRunState, rec: &ImageRecord) -> Result<ImageOutcome> {
        let svc = &self.services;
        let id = rec.image_id.as_str();
        let mut audit = AuditLog::default();
        let image = match load_image(rec) {
            Ok(i) => i,
            Err(msg) => {
                warn!("skipping image {id}: {msg}");
                audit.push_detail(id, Stage::Image, Action::Dropped, Reason::ImageFailed, id, msg);
                return Ok(ImageOutcome {
                    audit: audit.records,
                    failed: true,
                    ..ImageOutcome::default()
                });
            }
        };

        let seeds = self.seeds.as_ref().map(|m| m.get(id).cloned().unwrap_or_default());
        let descriptions: Vec<RegionDescription> = self.stage(state, id, StageMarker::Describe, &mut audit, |a| {
            match &seeds {
                Some(s) if s.is_empty() => {
                    a.push_detail(id, Stage::Describe, Action::Dropped, Reason::NoDescriptions, id, "no seed masks");
                    Ok(Vec::new())
                }
                Some(s) => Ok(s
                    .iter()
                    .enumerate()
                    .map(|(i, s)| RegionDescription {
                        image_id: id.to_string(),
                        index: i as u32 + 1,
                        text: s.prompt.clone(),
                    })
                    .collect()),
                None => stage1_describe(svc, &image, a),
            }
        })?;

        let grounded: Vec<GroundedRegion> = self.stage(state, id, StageMarker::Ground, &mut audit, |a| match &seeds {
            Some(s) => Ok(seeded_regions(&image, s, a)),
            None => {
                let mut out = Vec::new();
                for d in &descriptions {
                    out.extend(stage2_ground(svc, &image, d, a)?);
                }
                Ok(out)
            }
        })?;

        let refine = seeds.is_none() || self.cfg.refine_seed_masks;
        let regions: Vec<GroundedRegion> = self.stage(state, id, StageMarker::Verify, &mut audit, |a| {
            let mut out = Vec::new();
            for r in grounded.iter().cloned() {
                let mut r = stage3_verify(svc, &image, r, a)?;
                if r.verdicts.get(crate::stages::CONSISTENCY) == Some(&Verdict::Accept) {
                    if refine {
                        r = stage3_refine(svc, &image, r, a)?;
                    } else {
                        r.final_mask = Some(r.initial_mask.clone());
                    }
                }
                out.push(r);
            }
            Ok(out)
        })?;
        let accepted: Vec<GroundedRegion> = regions.iter().filter(|r| r.is_accepted()).cloned().collect();

        let candidates: Vec<CandidatePrompt> = self.stage(state, id, StageMarker::Generate, &mut audit, |a| {
            let mut out = Vec::new();
            for &c in &self.cfg.concepts {
                out.extend(stage4_generate(svc, &image, &accepted, c, a)?);
            }
            Ok(out)
        })?;

        let aligned: Vec<CandidatePrompt> = self.stage(state, id, StageMarker::Align, &mut audit, |a| {
            candidates
                .iter()
                .cloned()
                .map(|p| stage5_align(svc, &image, p, &accepted, a))
                .collect()
        })?;

        let mut positives: BTreeMap<ConceptFamily, Vec<Sample>> = BTreeMap::new();
        for p in aligned.iter().filter(|p| p.aligned == Some(Verdict::Accept)) {
            let mask = union_mask(&accepted, &p.region_indices, image.height(), image.width())?;
            let list = positives.entry(p.concept).or_default();
            let k = list.len();
            list.push(positive_sample(rec, p, &mask, k, self.cfg.stages.split));
        }

        let negatives: Vec<Sample> = self.stage(state, id, StageMarker::Negatives, &mut audit, |a| {
            let mut out = Vec::new();
            if self.cfg.negatives {
                for &c in &self.cfg.concepts {
                    let quota = positives.get(&c).map_or(0, Vec::len);
                    out.extend(generate_negatives(svc, &image, rec, &accepted, c, quota, a)?);
                }
            }
            Ok(out)
        })?;

        let mut samples = Vec::new();
        for &c in &self.cfg.concepts {
            samples.extend(positives.remove(&c).unwrap_or_default());
            samples.extend(negatives.iter().filter(|s| s.concept == c).cloned());
        }
        Ok(ImageOutcome {
            samples,
            audit: audit.records,
            regions,
            failed: false,
        })
    }
}

fn load_image(rec: &ImageRecord) -> std::result::Result<ImageInput, String> {
    let rgb = image::open(&rec.uri).map_err(|e| format!("{}: {e}", rec.uri))?.to_rgb8();
    if rgb.dimensions() != (rec.width, rec.height) {
        return Err(format!(
            "{} is {}x{}, record says {}x{}",
            rec.uri,
            rgb.width(),
            rgb.height(),
            rec.width,
            rec.height
        ));
    }
    Ok(ImageInput::new(rec.image_id.clone(), rgb))
}

fn images_jsonl(images: &[ImageRecord]) -> String {
    images
        .iter()
        .map(|r| serde_json::to_string(r).expect("image record serializes") + "\n")
        .collect()
}

fn regions_jsonl(regions: &[GroundedRegion]) -> String {
    regions
        .iter()
        .map(|r| serde_json::to_string(r).expect("region serializes") + "\n")
        .collect()
}

pub fn parse_regions_jsonl(text: &str) -> Result<Vec<GroundedRegion>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| EngineError::State(format!("regions.jsonl: {e}"))))
        .collect()
}

/// Image records for the PNG and JPEG files in `dir`, sorted by file name.
/// The image id is the file stem; the uri is the path as joined onto `dir`.
pub fn image_records_from_dir(dir: &Path) -> Result<Vec<ImageRecord>> {
    let mut paths = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| EngineError::io(dir, e))? {
        let path = entry.map_err(|e| EngineError::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
            paths.push(path);
        }
    }
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    let mut ids = std::collections::BTreeSet::new();
    for path in paths {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        if !ids.insert(stem.clone()) {
            return Err(EngineError::Config(format!("two images share the id `{stem}` in {}", dir.display())));
        }
        let (width, height) = image::image_dimensions(&path)
            .map_err(|e| EngineError::Config(format!("{}: {e}", path.display())))?;
        out.push(ImageRecord {
            image_id: stem,
            uri: path.to_string_lossy().into_owned(),
            width,
            height,
        });
    }
    Ok(out)
}

/// Builds the pipeline from `cfg` and runs it over `images`.
pub fn run_pipeline(images: &[ImageRecord], cfg: &EngineConfig) -> Result<RunOutput> {
    Pipeline::new(cfg.clone())?.run(images)
}

/// Continues the run recorded in `out_dir` with its saved configuration and
/// image list.
pub fn resume_pipeline(out_dir: &Path) -> Result<RunOutput> {
    let cfg = EngineConfig::load(&out_dir.join("config.json"))?;
    let path = out_dir.join("images.jsonl");
    let text = std::fs::read_to_string(&path).map_err(|e| EngineError::io(&path, e))?;
    let images: Vec<ImageRecord> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| EngineError::State(format!("{}: {e}", path.display())))?;
    run_pipeline(&images, &cfg)
}

/// Every emitted negative carries an all-background mask.
pub fn negatives_are_empty(manifest: &DatasetManifest) -> Result<bool> {
    for s in manifest.samples.iter().filter(|s| s.is_negative) {
        if rle_decode(&s.mask)?.count() != 0 {
            return Ok(false);
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_unknown_keys_and_fills_defaults() {
        let cfg = EngineConfig::synthetic("r", "/tmp/x", 1);
        let mut v = serde_json::to_value(&cfg).unwrap();
        let back: EngineConfig = serde_json::from_value(v.clone()).unwrap();
        assert_eq!(back, cfg);
        v["surprise"] = serde_json::json!(1);
        assert!(serde_json::from_value::<EngineConfig>(v).is_err());

        let minimal = serde_json::json!({
            "run_id": "r",
            "out_dir": "o",
            "vlm": {"endpoint": "mock://synthetic"},
            "detector": {"endpoint": "mock://synthetic"},
            "segmenter": {"endpoint": "mock://synthetic"},
        });
        let cfg: EngineConfig = serde_json::from_value(minimal).unwrap();
        assert_eq!(cfg.workers, 1);
        assert_eq!(cfg.stages, StageParams::default());
        assert_eq!(cfg.concepts.len(), 5);
        assert!(cfg.negatives && !cfg.refine_seed_masks);
        assert_eq!(cfg.cache_dir(), PathBuf::from("o/cache"));
        cfg.validate().unwrap();
    }

    #[test]
    fn fingerprint_ignores_parallelism() {
        let a = EngineConfig::synthetic("r", "/tmp/x", 1);
        let b = EngineConfig { workers: 4, ..a.clone() };
        let c = EngineConfig::synthetic("r", "/tmp/x", 2);
        let t = TemplateRegistry::defaults();
        assert_eq!(a.fingerprint(&t), b.fingerprint(&t));
        assert_ne!(a.fingerprint(&t), c.fingerprint(&t));
    }
}
