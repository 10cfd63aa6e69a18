//! The five generate-and-verify stages plus negative generation.
//!
//! Each stage function takes the shared [`Services`], the image and the
//! previous stage's output, and appends one audit record per dropped or
//! rejected item. Backend failures are handled by stage policy and never
//! abort the run; only cancellation and environment failures surface as
//! [`EngineError`].

use std::collections::BTreeSet;
use std::sync::Arc;

use convseg_core::mask::render_marks_overlay;
use convseg_core::{
    binary_iou, rle_decode, rle_encode, BinaryMask, ConceptFamily, ImageRecord, MaskRle, Provenance, Sample, Split,
};
use image::RgbImage;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::audit::{Action, AuditLog, Reason, Stage};
use crate::backends::{
    detect_region, segment_from_box, segment_from_grid, vlm_complete, BackendError, Backends, Detection, ImageInput,
    RequestTag, ResponseSchema, SegmenterCandidate, Verdict, VlmRequest, VlmResponse,
};
use crate::cache::{instrument, CallCache, CallControl, CallStats};
use crate::error::{EngineError, Result};
use crate::render::highlight;
use crate::templates::{TemplateKind, TemplateRegistry};
use crate::types::{CandidatePrompt, GroundedRegion, RegionDescription};

pub const SYSTEM_TEXT: &str = "You are a careful visual annotator. Follow the instructions exactly and \
answer only in the requested format.";

pub const CONSISTENCY: &str = "consistency";
pub const REFINEMENT: &str = "refinement";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageParams {
    pub min_regions: usize,
    pub max_regions: usize,
    pub max_words: usize,
    pub max_prompts: usize,
    /// Side of the point grid used for refinement.
    pub grid_side: usize,
    /// Fraction of the box size added on each side before laying the grid.
    pub grid_dilation: f64,
    /// Forwarded to the VLM with every request.
    pub seed: Option<u64>,
    pub split: Split,
}

impl Default for StageParams {
    fn default() -> Self {
        StageParams {
            min_regions: 5,
            max_regions: 7,
            max_words: 15,
            max_prompts: 3,
            grid_side: 16,
            grid_dilation: 0.1,
            seed: None,
            split: Split::Train,
        }
    }
}

impl StageParams {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.min_regions == 0 || self.min_regions > self.max_regions {
            return Err(format!(
                "need 1 <= min_regions <= max_regions, got {} and {}",
                self.min_regions, self.max_regions
            ));
        }
        if self.max_words == 0 || self.max_prompts == 0 || self.grid_side == 0 {
            return Err("max_words, max_prompts and grid_side must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.grid_dilation) {
            return Err(format!("grid_dilation must be in [0, 1], got {}", self.grid_dilation));
        }
        Ok(())
    }
}

/// Backends (instrumented for caching, counting and cancellation), templates
/// and parameters shared by all stages.
pub struct Services {
    pub backends: Backends,
    pub templates: TemplateRegistry,
    pub params: StageParams,
    control: Arc<CallControl>,
}

impl Services {
    pub fn new(backends: Backends, templates: TemplateRegistry, params: StageParams, cache: Option<CallCache>) -> Self {
        let control = Arc::new(CallControl::default());
        Services {
            backends: instrument(backends, cache, control.clone()),
            templates,
            params,
            control,
        }
    }

    pub fn control(&self) -> Arc<CallControl> {
        self.control.clone()
    }

    pub fn stats(&self) -> CallStats {
        self.control.stats()
    }

    fn request(
        &self,
        kind: TemplateKind,
        image: &ImageInput,
        concept: Option<ConceptFamily>,
        user_text: String,
        images: Vec<RgbImage>,
        schema: ResponseSchema,
    ) -> VlmRequest {
        VlmRequest {
            system_text: SYSTEM_TEXT.into(),
            user_text: Some(user_text),
            images,
            response_schema: schema,
            tag: RequestTag {
                kind,
                image_id: image.image_id.clone(),
                concept,
            },
            seed: self.params.seed,
        }
    }

    fn ask(&self, req: &VlmRequest) -> Result<std::result::Result<VlmResponse, BackendError>> {
        lift(vlm_complete(&self.backends.vlm_cfg, self.backends.vlm.as_ref(), req))
    }

    fn render(&self, concept: Option<ConceptFamily>, kind: TemplateKind, values: &[(&str, String)]) -> Result<String> {
        Ok(self.templates.render(concept, kind, values)?)
    }
}

/// Separates cancellation, which stops the run, from ordinary backend failures.
fn lift<T>(r: std::result::Result<T, BackendError>) -> Result<std::result::Result<T, BackendError>> {
    match r {
        Err(BackendError::Cancelled) => Err(EngineError::Cancelled),
        other => Ok(other),
    }
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

fn description_text(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Object(m) => m
            .get("description")
            .or_else(|| m.get("text"))
            .and_then(Value::as_str)
            .map(str::to_string),
        _ => None,
    }
}

/// Scene understanding: asks for `min_regions..=max_regions` short region
/// descriptions. Over-long descriptions are dropped, extras beyond
/// `max_regions` are cut, and an image with fewer than `min_regions` valid
/// descriptions is flagged (or skipped when it has none).
pub fn stage1_describe(svc: &Services, image: &ImageInput, audit: &mut AuditLog) -> Result<Vec<RegionDescription>> {
    let p = &svc.params;
    let id = image.image_id.as_str();
    let text = svc.render(
        None,
        TemplateKind::Scene,
        &[
            ("min_regions", p.min_regions.to_string()),
            ("max_regions", p.max_regions.to_string()),
            ("max_words", p.max_words.to_string()),
        ],
    )?;
    let req = svc.request(
        TemplateKind::Scene,
        image,
        None,
        text,
        vec![image.rgb.clone()],
        ResponseSchema::JsonObject,
    );
    let resp = match svc.ask(&req)? {
        Ok(r) => r,
        Err(e) => {
            let reason = match e {
                BackendError::Parse { .. } => Reason::UnparseableResponse,
                _ => Reason::Backend,
            };
            audit.push_detail(id, Stage::Describe, Action::Dropped, reason, id, e.to_string());
            return Ok(Vec::new());
        }
    };
    let Some(list) = resp.parsed.as_ref().and_then(|v| v.get("regions")).and_then(Value::as_array) else {
        audit.push_detail(id, Stage::Describe, Action::Dropped, Reason::UnparseableResponse, id, "no `regions` array");
        return Ok(Vec::new());
    };

    let mut valid: Vec<String> = Vec::new();
    for entry in list {
        let Some(t) = description_text(entry).map(|t| t.trim().to_string()) else {
            audit.push_detail(id, Stage::Describe, Action::Dropped, Reason::DescriptionEmpty, entry.to_string(), "not a description");
            continue;
        };
        let words = word_count(&t);
        if words == 0 {
            audit.push(id, Stage::Describe, Action::Dropped, Reason::DescriptionEmpty, t);
        } else if words > p.max_words {
            let detail = format!("{words} words > {}", p.max_words);
            audit.push_detail(id, Stage::Describe, Action::Dropped, Reason::DescriptionTooLong, t, detail);
        } else {
            valid.push(t);
        }
    }
    for extra in valid.drain(valid.len().min(p.max_regions)..) {
        audit.push_detail(
            id,
            Stage::Describe,
            Action::Dropped,
            Reason::DescriptionOverLimit,
            extra,
            format!("more than {} regions", p.max_regions),
        );
    }
    if valid.is_empty() {
        audit.push(id, Stage::Describe, Action::Dropped, Reason::NoDescriptions, id);
        return Ok(Vec::new());
    }
    if valid.len() < p.min_regions {
        let detail = format!("{} of at least {}", valid.len(), p.min_regions);
        audit.push_detail(id, Stage::Describe, Action::Flagged, Reason::LowYield, id, detail);
    }
    Ok(valid
        .into_iter()
        .enumerate()
        .map(|(i, text)| RegionDescription {
            image_id: id.to_string(),
            index: i as u32 + 1,
            text,
        })
        .collect())
}

/// Grounding: detector box for the description, then the segmenter's best
/// mask for that box.
pub fn stage2_ground(
    svc: &Services,
    image: &ImageInput,
    desc: &RegionDescription,
    audit: &mut AuditLog,
) -> Result<Option<GroundedRegion>> {
    let b = &svc.backends;
    let id = image.image_id.as_str();
    let item = desc.index.to_string();
    let det: Detection = match lift(detect_region(&b.detector_cfg, b.detector.as_ref(), image, &desc.text))? {
        Ok(d) => d,
        Err(BackendError::NoDetection { .. }) => {
            audit.push_detail(id, Stage::Ground, Action::Dropped, Reason::NoDetection, item, &desc.text);
            return Ok(None);
        }
        Err(e) => {
            audit.push_detail(id, Stage::Ground, Action::Dropped, Reason::Backend, item, e.to_string());
            return Ok(None);
        }
    };
    if det.clamped {
        let detail = format!("clamped to {:?}", det.bbox);
        audit.push_detail(id, Stage::Ground, Action::Warning, Reason::BoxClamped, item.clone(), detail);
    }
    match lift(segment_from_box(&b.segmenter_cfg, b.segmenter.as_ref(), image, &det.bbox))? {
        Ok(best) => Ok(Some(GroundedRegion::new(desc.clone(), det.bbox, best.mask))),
        Err(e) => {
            audit.push_detail(id, Stage::Ground, Action::Dropped, Reason::SegmentationFailed, item, e.to_string());
            Ok(None)
        }
    }
}

/// Regions taken directly from seed masks, skipping description and grounding.
pub fn seeded_regions(image: &ImageInput, seeds: &[Sample], audit: &mut AuditLog) -> Vec<GroundedRegion> {
    let id = image.image_id.as_str();
    let mut out = Vec::new();
    for (i, s) in seeds.iter().enumerate() {
        let index = i as u32 + 1;
        let mask = match rle_decode(&s.mask) {
            Ok(m) if m.dims() == (image.height(), image.width()) => m,
            Ok(m) => {
                let detail = format!("mask is {}x{}", m.height(), m.width());
                audit.push_detail(id, Stage::Ground, Action::Dropped, Reason::SegmentationFailed, &s.sample_id, detail);
                continue;
            }
            Err(e) => {
                audit.push_detail(id, Stage::Ground, Action::Dropped, Reason::SegmentationFailed, &s.sample_id, e.to_string());
                continue;
            }
        };
        let Some(bbox) = mask.bbox() else {
            audit.push(id, Stage::Ground, Action::Dropped, Reason::EmptySeedMask, &s.sample_id);
            continue;
        };
        let desc = RegionDescription {
            image_id: id.to_string(),
            index,
            text: s.prompt.clone(),
        };
        out.push(GroundedRegion::new(desc, bbox, mask));
    }
    out
}

/// Consistency check: does the highlighted mask match the description? An
/// unparseable verdict or a failed call counts as a rejection.
pub fn stage3_verify(
    svc: &Services,
    image: &ImageInput,
    mut region: GroundedRegion,
    audit: &mut AuditLog,
) -> Result<GroundedRegion> {
    let id = image.image_id.as_str();
    let item = region.index().to_string();
    let shown = highlight(&image.rgb, &region.initial_mask, Some(&region.bbox))?;
    let text = svc.render(None, TemplateKind::MaskVerify, &[("description", region.description.text.clone())])?;
    let req = svc.request(
        TemplateKind::MaskVerify,
        image,
        None,
        text,
        vec![image.rgb.clone(), shown],
        ResponseSchema::AcceptReject,
    );
    let verdict = match svc.ask(&req)? {
        Ok(resp) => match resp.verdict() {
            Some(Verdict::Accept) => Verdict::Accept,
            _ => {
                audit.push(id, Stage::Verify, Action::Rejected, Reason::ConsistencyRejected, item);
                Verdict::Reject
            }
        },
        Err(BackendError::Parse { raw, .. }) => {
            audit.push_detail(id, Stage::Verify, Action::Rejected, Reason::UnparseableVerdict, item, raw);
            Verdict::Reject
        }
        Err(e) => {
            audit.push_detail(id, Stage::Verify, Action::Rejected, Reason::Backend, item, e.to_string());
            Verdict::Reject
        }
    };
    region.verdicts.insert(CONSISTENCY.into(), verdict);
    Ok(region)
}

/// Index of the candidate with the highest IoU against `reference`; the
/// first one wins ties.
pub fn best_by_iou(reference: &BinaryMask, cands: &[SegmenterCandidate]) -> Result<Option<usize>> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in cands.iter().enumerate() {
        let iou = binary_iou(reference, &c.mask)?;
        if best.is_none_or(|(_, b)| iou > b) {
            best = Some((i, iou));
        }
    }
    Ok(best.map(|(i, _)| i))
}

/// Boundary refinement for an accepted region: re-segment from a point grid
/// over the dilated box, take the candidate closest to the initial mask and
/// let the VLM choose between the two. Falls back to the initial mask when
/// the segmenter or the comparison fails.
pub fn stage3_refine(
    svc: &Services,
    image: &ImageInput,
    mut region: GroundedRegion,
    audit: &mut AuditLog,
) -> Result<GroundedRegion> {
    let p = &svc.params;
    let b = &svc.backends;
    let id = image.image_id.as_str();
    let item = region.index().to_string();
    let (w, h) = image.rgb.dimensions();
    let points = region.bbox.dilate(p.grid_dilation, w, h).grid_points(p.grid_side);

    let cands = match lift(segment_from_grid(&b.segmenter_cfg, b.segmenter.as_ref(), image, &points))? {
        Ok(c) => c,
        Err(e) => {
            audit.push_detail(id, Stage::Refine, Action::Warning, Reason::RefineFallback, item, e.to_string());
            region.final_mask = Some(region.initial_mask.clone());
            return Ok(region);
        }
    };
    let Some(best) = best_by_iou(&region.initial_mask, &cands)? else {
        audit.push(id, Stage::Refine, Action::Warning, Reason::RefineNoCandidates, item);
        region.final_mask = Some(region.initial_mask.clone());
        return Ok(region);
    };
    let refined = cands[best].mask.clone();
    region.refined_mask = Some(refined.clone());
    if refined == region.initial_mask {
        region.final_mask = Some(refined);
        return Ok(region);
    }

    let text = svc.render(None, TemplateKind::MaskCompare, &[("description", region.description.text.clone())])?;
    let req = svc.request(
        TemplateKind::MaskCompare,
        image,
        None,
        text,
        vec![
            image.rgb.clone(),
            highlight(&image.rgb, &region.initial_mask, None)?,
            highlight(&image.rgb, &refined, None)?,
        ],
        ResponseSchema::JsonObject,
    );
    let choice = match svc.ask(&req)? {
        Ok(resp) => resp
            .parsed
            .as_ref()
            .and_then(|v| v.get("choice"))
            .and_then(Value::as_str)
            .map(|s| s.trim().to_ascii_uppercase()),
        Err(e) => {
            audit.push_detail(id, Stage::Refine, Action::Warning, Reason::RefineFallback, item, e.to_string());
            region.final_mask = Some(region.initial_mask.clone());
            return Ok(region);
        }
    };
    match choice.as_deref() {
        Some("B") => {
            region.verdicts.insert(REFINEMENT.into(), Verdict::Accept);
            region.final_mask = Some(refined);
        }
        Some("A") => {
            region.verdicts.insert(REFINEMENT.into(), Verdict::Reject);
            region.final_mask = Some(region.initial_mask.clone());
        }
        _ => {
            audit.push_detail(id, Stage::Refine, Action::Warning, Reason::RefineFallback, item, "no usable choice");
            region.final_mask = Some(region.initial_mask.clone());
        }
    }
    Ok(region)
}

/// Lowercased words with punctuation removed.
fn tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

/// For prompts of the form "segment [the|a|an] <phrase>", the phrase.
pub fn trivial_phrase(prompt: &str) -> Option<Vec<String>> {
    let words = tokens(prompt);
    let rest = words.strip_prefix(&["segment".to_string()])?;
    let rest = match rest.first().map(String::as_str) {
        Some("the" | "a" | "an") => &rest[1..],
        _ => rest,
    };
    (!rest.is_empty()).then(|| rest.to_vec())
}

fn contains_phrase(text: &str, phrase: &[String]) -> bool {
    let words = tokens(text);
    words.windows(phrase.len()).any(|w| w == phrase)
}

/// A prompt is trivial when it only names a category ("segment the car") and
/// exactly one accepted region's description mentions that category.
pub fn is_trivial(prompt: &str, accepted: &[GroundedRegion]) -> bool {
    let Some(phrase) = trivial_phrase(prompt) else {
        return false;
    };
    accepted
        .iter()
        .filter(|r| contains_phrase(&r.description.text, &phrase))
        .count()
        == 1
}

pub fn descriptions_block(regions: &[GroundedRegion]) -> String {
    regions
        .iter()
        .map(|r| format!("[{}] {}", r.index(), r.description.text))
        .collect::<Vec<_>>()
        .join("\n")
}

fn final_masks(regions: &[GroundedRegion]) -> Vec<(u32, BinaryMask)> {
    regions
        .iter()
        .filter_map(|r| r.final_mask.clone().map(|m| (r.index(), m)))
        .collect()
}

fn parse_prompt_entry(v: &Value) -> Option<(String, Vec<i64>)> {
    let text = v.get("prompt")?.as_str()?.trim().to_string();
    let regions: Vec<i64> = v.get("regions")?.as_array()?.iter().map(Value::as_i64).collect::<Option<_>>()?;
    (!text.is_empty() && !regions.is_empty()).then_some((text, regions))
}

/// Prompt generation for one concept over the accepted regions. Prompts that
/// refer to unknown regions, repeat an earlier prompt or merely name a
/// single-instance category are pruned.
pub fn stage4_generate(
    svc: &Services,
    image: &ImageInput,
    accepted: &[GroundedRegion],
    concept: ConceptFamily,
    audit: &mut AuditLog,
) -> Result<Vec<CandidatePrompt>> {
    let id = image.image_id.as_str();
    let accepted: Vec<GroundedRegion> = accepted.iter().filter(|r| r.is_accepted()).cloned().collect();
    if accepted.is_empty() {
        return Ok(Vec::new());
    }
    let overlay = render_marks_overlay(&image.rgb, &final_masks(&accepted))?;
    let text = svc.render(
        Some(concept),
        TemplateKind::Positive,
        &[
            ("concept", concept.display_name().to_string()),
            ("descriptions", descriptions_block(&accepted)),
            ("max_prompts", svc.params.max_prompts.to_string()),
        ],
    )?;
    let req = svc.request(
        TemplateKind::Positive,
        image,
        Some(concept),
        text,
        vec![image.rgb.clone(), overlay],
        ResponseSchema::JsonObject,
    );
    let item = concept.as_str();
    let resp = match svc.ask(&req)? {
        Ok(r) => r,
        Err(e) => {
            let reason = match e {
                BackendError::Parse { .. } => Reason::UnparseableResponse,
                _ => Reason::Backend,
            };
            audit.push_detail(id, Stage::Generate, Action::Dropped, reason, item, e.to_string());
            return Ok(Vec::new());
        }
    };
    let Some(list) = resp.parsed.as_ref().and_then(|v| v.get("prompts")).and_then(Value::as_array) else {
        audit.push_detail(id, Stage::Generate, Action::Dropped, Reason::UnparseableResponse, item, "no `prompts` array");
        return Ok(Vec::new());
    };

    let known: BTreeSet<i64> = accepted.iter().map(|r| r.index() as i64).collect();
    let mut proposed = 0;
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for entry in list {
        let Some((text, regions)) = parse_prompt_entry(entry) else {
            audit.push(id, Stage::Generate, Action::Dropped, Reason::MalformedPrompt, entry.to_string());
            continue;
        };
        proposed += 1;
        if proposed > svc.params.max_prompts {
            let detail = format!("more than {} prompts for {item}", svc.params.max_prompts);
            audit.push_detail(id, Stage::Generate, Action::Dropped, Reason::PromptOverLimit, text, detail);
            continue;
        }
        let dangling: Vec<i64> = regions.iter().copied().filter(|i| !known.contains(i)).collect();
        if !dangling.is_empty() {
            let detail = format!("unknown regions {dangling:?}");
            audit.push_detail(id, Stage::Generate, Action::Dropped, Reason::DanglingRegion, text, detail);
            continue;
        }
        if !seen.insert(tokens(&text)) {
            audit.push(id, Stage::Generate, Action::Dropped, Reason::DuplicatePrompt, text);
            continue;
        }
        if is_trivial(&text, &accepted) {
            audit.push(id, Stage::Generate, Action::Dropped, Reason::TrivialPrompt, text);
            continue;
        }
        let region_indices: BTreeSet<u32> = regions.iter().map(|&i| i as u32).collect();
        out.push(CandidatePrompt {
            image_id: id.to_string(),
            concept,
            text,
            region_indices: region_indices.into_iter().collect(),
            aligned: None,
        });
    }
    Ok(out)
}

/// Union of the final masks of the regions named by `indices`.
pub fn union_mask(regions: &[GroundedRegion], indices: &[u32], height: usize, width: usize) -> Result<BinaryMask> {
    let mut out = BinaryMask::zeros(height, width);
    for i in indices {
        let r = regions
            .iter()
            .find(|r| r.index() == *i)
            .and_then(|r| r.final_mask.as_ref())
            .ok_or_else(|| EngineError::State(format!("prompt refers to region {i} without a final mask")))?;
        out = out.union(r)?;
    }
    Ok(out)
}

/// Alignment check: does the union of the prompt's regions answer the prompt
/// exactly? Unparseable verdicts and failed calls count as rejections.
pub fn stage5_align(
    svc: &Services,
    image: &ImageInput,
    mut prompt: CandidatePrompt,
    regions: &[GroundedRegion],
    audit: &mut AuditLog,
) -> Result<CandidatePrompt> {
    let id = image.image_id.as_str();
    let union = union_mask(regions, &prompt.region_indices, image.height(), image.width())?;
    let text = svc.render(
        Some(prompt.concept),
        TemplateKind::AlignVerify,
        &[
            ("prompt", prompt.text.clone()),
            ("concept", prompt.concept.display_name().to_string()),
        ],
    )?;
    let req = svc.request(
        TemplateKind::AlignVerify,
        image,
        Some(prompt.concept),
        text,
        vec![image.rgb.clone(), highlight(&image.rgb, &union, None)?],
        ResponseSchema::AcceptReject,
    );
    let item = prompt.text.clone();
    let verdict = match svc.ask(&req)? {
        Ok(resp) if resp.verdict() == Some(Verdict::Accept) => Verdict::Accept,
        Ok(_) => {
            audit.push(id, Stage::Align, Action::Rejected, Reason::AlignmentRejected, item);
            Verdict::Reject
        }
        Err(BackendError::Parse { raw, .. }) => {
            audit.push_detail(id, Stage::Align, Action::Rejected, Reason::UnparseableVerdict, item, raw);
            Verdict::Reject
        }
        Err(e) => {
            audit.push_detail(id, Stage::Align, Action::Rejected, Reason::Backend, item, e.to_string());
            Verdict::Reject
        }
    };
    prompt.aligned = Some(verdict);
    Ok(prompt)
}

pub fn positive_sample(
    record: &ImageRecord,
    prompt: &CandidatePrompt,
    mask: &BinaryMask,
    k: usize,
    split: Split,
) -> Sample {
    Sample {
        sample_id: format!("{}-{}-{k}", record.image_id, prompt.concept.as_str()),
        image: record.clone(),
        prompt: prompt.text.clone(),
        mask: rle_encode(mask),
        concept: prompt.concept,
        split,
        provenance: Provenance::Engine,
        is_negative: false,
    }
}

pub fn negative_sample(record: &ImageRecord, concept: ConceptFamily, prompt: &str, k: usize, split: Split) -> Sample {
    Sample {
        sample_id: format!("{}-{}-neg{k}", record.image_id, concept.as_str()),
        image: record.clone(),
        prompt: prompt.to_string(),
        mask: MaskRle::empty(record.height as usize, record.width as usize),
        concept,
        split,
        provenance: Provenance::Engine,
        is_negative: true,
    }
}

/// Negative prompts for one concept: candidates that nothing in the image
/// satisfies, each confirmed by a verifier. At most `quota` are emitted,
/// normally the number of positives for the same image and concept.
pub fn generate_negatives(
    svc: &Services,
    image: &ImageInput,
    record: &ImageRecord,
    accepted: &[GroundedRegion],
    concept: ConceptFamily,
    quota: usize,
    audit: &mut AuditLog,
) -> Result<Vec<Sample>> {
    if quota == 0 {
        return Ok(Vec::new());
    }
    let id = image.image_id.as_str();
    let accepted: Vec<GroundedRegion> = accepted.iter().filter(|r| r.is_accepted()).cloned().collect();
    let text = svc.render(
        Some(concept),
        TemplateKind::NegativeGeneration,
        &[
            ("concept", concept.display_name().to_string()),
            ("descriptions", descriptions_block(&accepted)),
            ("count", quota.to_string()),
        ],
    )?;
    let req = svc.request(
        TemplateKind::NegativeGeneration,
        image,
        Some(concept),
        text,
        vec![image.rgb.clone()],
        ResponseSchema::JsonObject,
    );
    let resp = match svc.ask(&req)? {
        Ok(r) => r,
        Err(e) => {
            let reason = match e {
                BackendError::Parse { .. } => Reason::UnparseableResponse,
                _ => Reason::Backend,
            };
            audit.push_detail(id, Stage::Negatives, Action::Dropped, reason, concept.as_str(), e.to_string());
            return Ok(Vec::new());
        }
    };
    let Some(list) = resp.parsed.as_ref().and_then(|v| v.get("prompts")).and_then(Value::as_array) else {
        let detail = "no `prompts` array";
        audit.push_detail(id, Stage::Negatives, Action::Dropped, Reason::UnparseableResponse, concept.as_str(), detail);
        return Ok(Vec::new());
    };

    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for entry in list {
        let Some(prompt) = entry.as_str().map(str::trim).filter(|s| !s.is_empty()) else {
            audit.push(id, Stage::Negatives, Action::Dropped, Reason::MalformedPrompt, entry.to_string());
            continue;
        };
        if !seen.insert(tokens(prompt)) {
            audit.push(id, Stage::Negatives, Action::Dropped, Reason::DuplicatePrompt, prompt);
            continue;
        }
        if out.len() == quota {
            let detail = format!("quota of {quota} reached");
            audit.push_detail(id, Stage::Negatives, Action::Dropped, Reason::NegativeOverQuota, prompt, detail);
            continue;
        }
        let text = svc.render(None, TemplateKind::NegativeVerification, &[("prompt", prompt.to_string())])?;
        let req = svc.request(
            TemplateKind::NegativeVerification,
            image,
            Some(concept),
            text,
            vec![image.rgb.clone()],
            ResponseSchema::AcceptReject,
        );
        match svc.ask(&req)? {
            Ok(resp) if resp.verdict() == Some(Verdict::Accept) => {
                out.push(negative_sample(record, concept, prompt, out.len(), svc.params.split));
            }
            Ok(_) => audit.push(id, Stage::Negatives, Action::Rejected, Reason::NegativeRejected, prompt),
            Err(BackendError::Parse { raw, .. }) => {
                audit.push_detail(id, Stage::Negatives, Action::Rejected, Reason::UnparseableVerdict, prompt, raw)
            }
            Err(e) => audit.push_detail(id, Stage::Negatives, Action::Rejected, Reason::Backend, prompt, e.to_string()),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use convseg_core::BoundingBox;

    fn region(index: u32, text: &str) -> GroundedRegion {
        let desc = RegionDescription {
            image_id: "i".into(),
            index,
            text: text.into(),
        };
        let b = BoundingBox::new(0, 0, 2, 2);
        let mut r = GroundedRegion::new(desc, b, BinaryMask::from_box(4, 4, &b));
        r.final_mask = Some(r.initial_mask.clone());
        r.verdicts.insert(CONSISTENCY.into(), Verdict::Accept);
        r
    }

    #[test]
    fn trivial_phrase_strips_verb_and_article() {
        assert_eq!(trivial_phrase("Segment the car."), Some(vec!["car".to_string()]));
        assert_eq!(trivial_phrase("segment a red car"), Some(vec!["red".to_string(), "car".to_string()]));
        assert_eq!(trivial_phrase("the car on the left"), None);
        assert_eq!(trivial_phrase("segment the"), None);
    }

    #[test]
    fn trivial_only_when_a_single_region_matches() {
        let one = vec![region(1, "a blue car parked"), region(2, "a tall tree")];
        assert!(is_trivial("segment the car", &one));
        let two = vec![region(1, "a blue car"), region(2, "a red car")];
        assert!(!is_trivial("segment the car", &two));
        assert!(!is_trivial("segment the cart", &one));
        assert!(!is_trivial("the car that is parked", &one));
    }

    #[test]
    fn best_by_iou_prefers_first_on_ties() {
        let reference = BinaryMask::from_fn(4, 4, |y, _| y < 2);
        let c = |m: BinaryMask| SegmenterCandidate { mask: m, score: 0.0 };
        let cands = vec![
            c(BinaryMask::from_fn(4, 4, |y, _| y < 1)),
            c(BinaryMask::from_fn(4, 4, |y, _| y < 3)),
            c(BinaryMask::from_fn(4, 4, |y, _| y == 0)),
        ];
        // IoUs 0.5, 0.667, 0.5
        assert_eq!(best_by_iou(&reference, &cands).unwrap(), Some(1));
        let tied = vec![cands[0].clone(), cands[2].clone()];
        assert_eq!(best_by_iou(&reference, &tied).unwrap(), Some(0));
        assert_eq!(best_by_iou(&reference, &[]).unwrap(), None);
    }

    #[test]
    fn union_mask_requires_final_masks() {
        let mut regions = vec![region(1, "a"), region(2, "b")];
        regions[1].final_mask = Some(BinaryMask::from_fn(4, 4, |y, x| y == 3 && x == 3));
        assert_eq!(union_mask(&regions, &[1, 2], 4, 4).unwrap().count(), 5);
        regions[1].final_mask = None;
        assert!(union_mask(&regions, &[1, 2], 4, 4).is_err());
    }

    #[test]
    fn default_params_are_valid() {
        assert!(StageParams::default().validate().is_ok());
        let bad = StageParams {
            min_regions: 8,
            ..StageParams::default()
        };
        assert!(bad.validate().is_err());
    }
}
