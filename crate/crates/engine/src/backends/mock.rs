//! Offline backends.
//!
//! The synthetic mocks understand the flat-colored shape scenes produced by
//! `convseg_core::synthetic` by looking at pixels alone, so they work on any
//! such image on disk. Randomized choices are drawn from an RNG seeded by the
//! request content and the mock seed, which makes every mock a pure function
//! of `(request, seed)`.
//!
//! Scripted, table and fixture mocks replay exact answers for unit tests and
//! recorded runs.

use std::collections::{HashMap, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use convseg_core::synthetic::COLORS;
use convseg_core::{rle_decode, rle_encode, BinaryMask, BoundingBox, MaskRle};
use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    sha256_hex, BackendError, DetectorBackend, ImageInput, SegmenterBackend, SegmenterCandidate, VlmBackend,
    VlmRequest,
};
use crate::templates::TemplateKind;

/// One flat-colored object found in a synthetic scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneItem {
    pub color: &'static str,
    /// `square` or `circle`
    pub noun: &'static str,
    pub bbox: BoundingBox,
    pub mask: BinaryMask,
}

fn color_name(rgb: [u8; 3]) -> Option<&'static str> {
    COLORS.iter().find(|(_, c)| *c == rgb).map(|(n, _)| *n)
}

/// 4-connected component of pixels sharing the color at `(x, y)`.
pub fn flood_component(image: &RgbImage, x: u32, y: u32) -> BinaryMask {
    let (w, h) = image.dimensions();
    let target = image.get_pixel(x, y).0;
    let mut mask = BinaryMask::zeros(h as usize, w as usize);
    let mut stack = vec![(x, y)];
    mask.set(y as usize, x as usize, true);
    while let Some((cx, cy)) = stack.pop() {
        let mut visit = |nx: u32, ny: u32| {
            if !mask.get(ny as usize, nx as usize) && image.get_pixel(nx, ny).0 == target {
                mask.set(ny as usize, nx as usize, true);
                stack.push((nx, ny));
            }
        };
        if cx > 0 {
            visit(cx - 1, cy);
        }
        if cx + 1 < w {
            visit(cx + 1, cy);
        }
        if cy > 0 {
            visit(cx, cy - 1);
        }
        if cy + 1 < h {
            visit(cx, cy + 1);
        }
    }
    mask
}

/// Objects in raster order of their first pixel. Components whose color is not
/// in the synthetic palette are background.
pub fn analyze_scene(image: &RgbImage) -> Vec<SceneItem> {
    let (w, h) = image.dimensions();
    let mut claimed = BinaryMask::zeros(h as usize, w as usize);
    let mut items = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if claimed.get(y as usize, x as usize) {
                continue;
            }
            let Some(color) = color_name(image.get_pixel(x, y).0) else {
                continue;
            };
            let mask = flood_component(image, x, y);
            claimed = claimed.union(&mask).expect("same dimensions");
            let Some(bbox) = mask.bbox() else { continue };
            let filled = mask.count() as u64 == bbox.width() as u64 * bbox.height() as u64;
            items.push(SceneItem {
                color,
                noun: if filled { "square" } else { "circle" },
                bbox,
                mask,
            });
        }
    }
    items
}

fn horizontal(item: &SceneItem, width: u32) -> &'static str {
    let cx = (item.bbox.x_min + item.bbox.x_max) as f64 / 2.0;
    match (3.0 * cx / width as f64) as u32 {
        0 => "left",
        1 => "center",
        _ => "right",
    }
}

fn vertical(item: &SceneItem, height: u32) -> &'static str {
    let cy = (item.bbox.y_min + item.bbox.y_max) as f64 / 2.0;
    match (3.0 * cy / height as f64) as u32 {
        0 => "top",
        1 => "middle",
        _ => "bottom",
    }
}

fn contains_word(text: &str, word: &str) -> bool {
    text.to_ascii_lowercase()
        .split(|c: char| !c.is_ascii_alphanumeric())
        .any(|w| w == word)
}

/// `[n] description` lines of a rendered request.
pub fn indexed_lines(text: &str) -> Vec<(u32, String)> {
    text.lines()
        .filter_map(|l| {
            let l = l.trim();
            let rest = l.strip_prefix('[')?;
            let (n, d) = rest.split_once(']')?;
            Some((n.trim().parse().ok()?, d.trim().to_string()))
        })
        .collect()
}

/// The text after a `Prompt:` label, unquoted.
pub fn labelled_prompt(text: &str) -> Option<String> {
    text.lines().find_map(|l| {
        let p = l.trim().strip_prefix("Prompt:")?;
        Some(p.trim().trim_matches('"').to_string())
    })
}

fn seeded_rng(req: &VlmRequest, seed: u64) -> ChaCha8Rng {
    let digest = sha256_hex(format!("{}:{seed}", req.hash()).as_bytes());
    let mut bytes = [0u8; 32];
    for (i, b) in bytes.iter_mut().enumerate() {
        *b = u8::from_str_radix(&digest[2 * i..2 * i + 2], 16).expect("hex digest");
    }
    ChaCha8Rng::from_seed(bytes)
}

/// A parsed region line: index, color, noun and position words.
#[derive(Debug, Clone)]
struct RegionLine {
    index: u32,
    color: &'static str,
    noun: &'static str,
    text: String,
}

fn parse_regions(text: &str) -> Vec<RegionLine> {
    indexed_lines(text)
        .into_iter()
        .filter_map(|(index, d)| {
            let color = COLORS.iter().map(|(n, _)| *n).find(|c| contains_word(&d, c))?;
            let noun = ["square", "circle"].into_iter().find(|n| contains_word(&d, n))?;
            Some(RegionLine {
                index,
                color,
                noun,
                text: d,
            })
        })
        .collect()
}

/// Seeded VLM for synthetic scenes.
#[derive(Debug, Clone)]
pub struct SyntheticVlm {
    pub seed: u64,
    /// Probability of rejecting at each verification gate.
    pub reject_rate: f64,
    /// Probability of proposing one over-long description, a dangling prompt
    /// or an invalid negative, to exercise the filters.
    pub noise_rate: f64,
}

impl SyntheticVlm {
    pub fn new(seed: u64) -> Self {
        SyntheticVlm {
            seed,
            reject_rate: 0.1,
            noise_rate: 0.25,
        }
    }

    fn gate(&self, rng: &mut ChaCha8Rng) -> String {
        if rng.gen_bool(self.reject_rate) { "reject" } else { "accept" }.into()
    }

    fn describe(&self, req: &VlmRequest, rng: &mut ChaCha8Rng) -> Result<String, BackendError> {
        let image = req
            .images
            .first()
            .ok_or_else(|| BackendError::Fatal("scene request without an image".into()))?;
        let (w, h) = image.dimensions();
        let mut regions: Vec<String> = analyze_scene(image)
            .iter()
            .map(|o| {
                let (v, hz) = (vertical(o, h), horizontal(o, w));
                let place = if v == "middle" && hz == "center" {
                    "the center".to_string()
                } else {
                    format!("the {v} {hz}")
                };
                format!("{} {} in {place} of the image", o.color, o.noun)
            })
            .collect();
        if rng.gen_bool(self.noise_rate) {
            regions.push(
                "a wide flat dark gray background surface that stretches behind every shape from edge to edge of the frame"
                    .into(),
            );
        }
        Ok(json!({ "regions": regions }).to_string())
    }

    fn positives(&self, req: &VlmRequest, rng: &mut ChaCha8Rng) -> Result<String, BackendError> {
        let concept = req
            .tag
            .concept
            .ok_or_else(|| BackendError::Fatal("prompt request without a concept".into()))?;
        let regions = parse_regions(req.user_text.as_deref().unwrap_or(""));
        let of_noun = |n: &str| -> Vec<u32> { regions.iter().filter(|r| r.noun == n).map(|r| r.index).collect() };
        let mut prompts: Vec<(String, Vec<u32>)> = Vec::new();
        use convseg_core::ConceptFamily::*;
        match concept {
            Entities => {
                for noun in ["square", "circle"] {
                    let idx = of_noun(noun);
                    if idx.len() == 1 {
                        prompts.push((format!("segment the {noun}"), idx));
                    } else if idx.len() > 1 {
                        prompts.push((format!("every {noun} in the picture"), idx));
                    }
                }
            }
            SpatialLayout => {
                for side in ["left", "right"] {
                    let idx: Vec<u32> = regions.iter().filter(|r| contains_word(&r.text, side)).map(|r| r.index).collect();
                    if !idx.is_empty() {
                        prompts.push((format!("the shapes on the {side} side of the picture"), idx));
                    }
                }
            }
            RelationsEvents => {
                if let [a, b, ..] = regions.as_slice() {
                    prompts.push((
                        format!("the {} {} together with the {} {}", a.color, a.noun, b.color, b.noun),
                        vec![a.index, b.index],
                    ));
                }
            }
            AffordancesFunctions => {
                let round = of_noun("circle");
                if !round.is_empty() {
                    prompts.push(("something that could roll across a table".into(), round));
                }
                let flat = of_noun("square");
                if !flat.is_empty() {
                    prompts.push(("pieces with flat edges that could be stacked".into(), flat));
                }
            }
            PhysicsSafety => {
                let round = of_noun("circle");
                if !round.is_empty() {
                    prompts.push(("objects that would roll away on a slope".into(), round));
                }
                let flat = of_noun("square");
                if !flat.is_empty() {
                    prompts.push(("blocks sturdy enough to hold another block".into(), flat));
                }
            }
        }
        if rng.gen_bool(self.noise_rate) {
            prompts.push(("the shape hidden under the others".into(), vec![99]));
        }
        let list: Vec<Value> = prompts.into_iter().map(|(p, r)| json!({ "prompt": p, "regions": r })).collect();
        Ok(json!({ "prompts": list }).to_string())
    }

    fn negatives(&self, req: &VlmRequest, rng: &mut ChaCha8Rng) -> Result<String, BackendError> {
        let regions = parse_regions(req.user_text.as_deref().unwrap_or(""));
        let present: Vec<&str> = regions.iter().map(|r| r.color).collect();
        let absent: Vec<&str> = COLORS.iter().map(|(n, _)| *n).filter(|c| !present.contains(c)).collect();
        let mut out = Vec::new();
        for (k, color) in absent.iter().take(2).enumerate() {
            let noun = if k % 2 == 0 { "square" } else { "circle" };
            out.push(format!("segment the {color} {noun}"));
        }
        if let Some(r) = regions.first() {
            out.push(format!("segment the {} triangle", r.color));
            if rng.gen_bool(self.noise_rate) {
                // actually present; verification must catch it
                out.insert(0, format!("segment the {} {}", r.color, r.noun));
            }
        }
        Ok(json!({ "prompts": out }).to_string())
    }

    fn verify_negative(&self, req: &VlmRequest) -> Result<String, BackendError> {
        let image = req
            .images
            .first()
            .ok_or_else(|| BackendError::Fatal("verification request without an image".into()))?;
        let text = req.user_text.as_deref().unwrap_or("");
        let prompt = labelled_prompt(text).unwrap_or_else(|| text.to_string());
        let present = analyze_scene(image)
            .iter()
            .any(|o| contains_word(&prompt, o.color) && contains_word(&prompt, o.noun));
        // accept means: nothing in the image satisfies the prompt
        Ok(if present { "reject" } else { "accept" }.into())
    }
}

impl VlmBackend for SyntheticVlm {
    fn id(&self) -> String {
        format!("synthetic-vlm(seed={})", self.seed)
    }

    fn complete(&self, req: &VlmRequest) -> Result<String, BackendError> {
        let mut rng = seeded_rng(req, self.seed);
        match req.tag.kind {
            TemplateKind::Scene => self.describe(req, &mut rng),
            TemplateKind::MaskVerify | TemplateKind::AlignVerify => Ok(self.gate(&mut rng)),
            TemplateKind::MaskCompare => {
                // A is the detector-seeded mask, B the grid-refined one
                let choice = if rng.gen_bool(0.25) { "A" } else { "B" };
                Ok(json!({ "choice": choice }).to_string())
            }
            TemplateKind::Positive => self.positives(req, &mut rng),
            TemplateKind::NegativeGeneration => self.negatives(req, &mut rng),
            TemplateKind::NegativeVerification => self.verify_negative(req),
        }
    }
}

/// Finds the object whose color and shape are both named in the text.
#[derive(Debug, Clone, Copy, Default)]
pub struct SyntheticDetector;

impl DetectorBackend for SyntheticDetector {
    fn id(&self) -> String {
        "synthetic-detector".into()
    }

    fn detect(&self, image: &ImageInput, text: &str) -> Result<Option<[f64; 4]>, BackendError> {
        Ok(analyze_scene(&image.rgb)
            .into_iter()
            .find(|o| contains_word(text, o.color) && contains_word(text, o.noun))
            .map(|o| {
                let b = o.bbox;
                [b.x_min as f64, b.y_min as f64, b.x_max as f64, b.y_max as f64]
            }))
    }
}

/// Box prompts fill the box interior; point prompts return the flood-filled
/// same-color component under the point.
#[derive(Debug, Clone, Copy, Default)]
pub struct SyntheticSegmenter;

impl SegmenterBackend for SyntheticSegmenter {
    fn id(&self) -> String {
        "synthetic-segmenter".into()
    }

    fn segment_box(&self, image: &ImageInput, bbox: &BoundingBox) -> Result<Vec<SegmenterCandidate>, BackendError> {
        Ok(vec![SegmenterCandidate {
            mask: BinaryMask::from_box(image.height(), image.width(), bbox),
            score: 1.0,
        }])
    }

    fn segment_points(&self, image: &ImageInput, points: &[(u32, u32)]) -> Result<Vec<SegmenterCandidate>, BackendError> {
        Ok(points
            .iter()
            .map(|&(x, y)| SegmenterCandidate {
                mask: flood_component(&image.rgb, x, y),
                score: 1.0,
            })
            .collect())
    }
}

/// Replays scripted answers, by exact request hash first, then by request
/// kind (queued answers are consumed in order, the last one repeats), then a
/// fallback.
#[derive(Debug, Default)]
pub struct ScriptedVlm {
    by_hash: HashMap<String, String>,
    by_kind: Mutex<HashMap<TemplateKind, VecDeque<String>>>,
    fallback: Option<String>,
    transient_failures: Mutex<u32>,
    log: Mutex<Vec<(TemplateKind, String)>>,
}

impl ScriptedVlm {
    pub fn new() -> Self {
        ScriptedVlm::default()
    }

    pub fn on_hash(mut self, hash: impl Into<String>, answer: impl Into<String>) -> Self {
        self.by_hash.insert(hash.into(), answer.into());
        self
    }

    pub fn on_request(self, req: &VlmRequest, answer: impl Into<String>) -> Self {
        let h = req.hash();
        self.on_hash(h, answer)
    }

    pub fn on_kind(self, kind: TemplateKind, answer: impl Into<String>) -> Self {
        self.by_kind
            .lock()
            .expect("script lock")
            .entry(kind)
            .or_default()
            .push_back(answer.into());
        self
    }

    pub fn fallback(mut self, answer: impl Into<String>) -> Self {
        self.fallback = Some(answer.into());
        self
    }

    /// The next `n` calls fail with a transient error.
    pub fn fail_first(self, n: u32) -> Self {
        *self.transient_failures.lock().expect("script lock") = n;
        self
    }

    /// `(kind, request hash)` of every call so far.
    pub fn calls(&self) -> Vec<(TemplateKind, String)> {
        self.log.lock().expect("script lock").clone()
    }
}

impl VlmBackend for ScriptedVlm {
    fn id(&self) -> String {
        "scripted-vlm".into()
    }

    fn complete(&self, req: &VlmRequest) -> Result<String, BackendError> {
        let hash = req.hash();
        self.log.lock().expect("script lock").push((req.tag.kind, hash.clone()));
        {
            let mut left = self.transient_failures.lock().expect("script lock");
            if *left > 0 {
                *left -= 1;
                return Err(BackendError::Transient("scripted failure".into()));
            }
        }
        if let Some(a) = self.by_hash.get(&hash) {
            return Ok(a.clone());
        }
        let mut kinds = self.by_kind.lock().expect("script lock");
        if let Some(q) = kinds.get_mut(&req.tag.kind) {
            if q.len() > 1 {
                return Ok(q.pop_front().expect("non-empty queue"));
            }
            if let Some(a) = q.front() {
                return Ok(a.clone());
            }
        }
        self.fallback
            .clone()
            .ok_or_else(|| BackendError::Fatal(format!("no scripted answer for {:?} request {hash}", req.tag.kind)))
    }
}

/// Boxes keyed by `(image_id, text)`.
#[derive(Debug, Clone, Default)]
pub struct TableDetector {
    boxes: HashMap<(String, String), [f64; 4]>,
}

impl TableDetector {
    pub fn new() -> Self {
        TableDetector::default()
    }

    pub fn with(mut self, image_id: &str, text: &str, bbox: [f64; 4]) -> Self {
        self.boxes.insert((image_id.into(), text.into()), bbox);
        self
    }
}

impl DetectorBackend for TableDetector {
    fn id(&self) -> String {
        "table-detector".into()
    }

    fn detect(&self, image: &ImageInput, text: &str) -> Result<Option<[f64; 4]>, BackendError> {
        Ok(self.boxes.get(&(image.image_id.clone(), text.to_string())).copied())
    }
}

/// Box and point answers keyed by image id; unknown prompts yield nothing.
#[derive(Debug, Clone, Default)]
pub struct TableSegmenter {
    boxes: HashMap<(String, BoundingBox), Vec<SegmenterCandidate>>,
    points: HashMap<(String, (u32, u32)), SegmenterCandidate>,
}

impl TableSegmenter {
    pub fn new() -> Self {
        TableSegmenter::default()
    }

    pub fn with_box(mut self, image_id: &str, bbox: BoundingBox, candidates: Vec<SegmenterCandidate>) -> Self {
        self.boxes.insert((image_id.into(), bbox), candidates);
        self
    }

    pub fn with_point(mut self, image_id: &str, point: (u32, u32), candidate: SegmenterCandidate) -> Self {
        self.points.insert((image_id.into(), point), candidate);
        self
    }
}

impl SegmenterBackend for TableSegmenter {
    fn id(&self) -> String {
        "table-segmenter".into()
    }

    fn segment_box(&self, image: &ImageInput, bbox: &BoundingBox) -> Result<Vec<SegmenterCandidate>, BackendError> {
        Ok(self.boxes.get(&(image.image_id.clone(), *bbox)).cloned().unwrap_or_default())
    }

    fn segment_points(&self, image: &ImageInput, points: &[(u32, u32)]) -> Result<Vec<SegmenterCandidate>, BackendError> {
        Ok(points
            .iter()
            .filter_map(|p| self.points.get(&(image.image_id.clone(), *p)).cloned())
            .collect())
    }
}

/// Recorded responses under `<root>/<backend>/<sha256>.json`.
#[derive(Debug, Clone)]
pub struct FixtureStore {
    root: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct StoredCandidate {
    mask_rle: MaskRle,
    score: f64,
}

impl FixtureStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        FixtureStore { root: root.into() }
    }

    pub fn path(&self, backend: &str, key: &str) -> PathBuf {
        self.root.join(backend).join(format!("{key}.json"))
    }

    fn read(&self, backend: &str, key: &str) -> Result<Value, BackendError> {
        let p = self.path(backend, key);
        let text = std::fs::read_to_string(&p)
            .map_err(|e| BackendError::Fatal(format!("no fixture {}: {e}", p.display())))?;
        serde_json::from_str(&text).map_err(|e| BackendError::Fatal(format!("bad fixture {}: {e}", p.display())))
    }

    fn write(&self, backend: &str, key: &str, value: &Value) -> std::io::Result<PathBuf> {
        let p = self.path(backend, key);
        std::fs::create_dir_all(p.parent().expect("fixture path has a parent"))?;
        std::fs::write(&p, serde_json::to_string_pretty(value).expect("json") + "\n")?;
        Ok(p)
    }

    pub fn detector_key(image: &ImageInput, text: &str) -> String {
        sha256_hex(json!({ "image": image.digest, "text": text }).to_string().as_bytes())
    }

    pub fn box_key(image: &ImageInput, bbox: &BoundingBox) -> String {
        sha256_hex(json!({ "image": image.digest, "box": bbox }).to_string().as_bytes())
    }

    pub fn points_key(image: &ImageInput, points: &[(u32, u32)]) -> String {
        sha256_hex(json!({ "image": image.digest, "points": points }).to_string().as_bytes())
    }

    pub fn record_vlm(&self, req: &VlmRequest, text: &str) -> std::io::Result<PathBuf> {
        self.write("vlm", &req.hash(), &json!({ "text": text }))
    }

    pub fn record_detection(&self, image: &ImageInput, text: &str, bbox: Option<[f64; 4]>) -> std::io::Result<PathBuf> {
        self.write("detector", &Self::detector_key(image, text), &json!({ "box": bbox }))
    }

    pub fn record_candidates(&self, key: &str, candidates: &[SegmenterCandidate]) -> std::io::Result<PathBuf> {
        let list: Vec<StoredCandidate> = candidates
            .iter()
            .map(|c| StoredCandidate {
                mask_rle: rle_encode(&c.mask),
                score: c.score,
            })
            .collect();
        self.write("segmenter", key, &json!({ "candidates": list }))
    }

    fn candidates(&self, key: &str) -> Result<Vec<SegmenterCandidate>, BackendError> {
        let v = self.read("segmenter", key)?;
        let list: Vec<StoredCandidate> = serde_json::from_value(v["candidates"].clone())
            .map_err(|e| BackendError::Fatal(format!("bad segmenter fixture {key}: {e}")))?;
        list.into_iter()
            .map(|c| {
                let mask = rle_decode(&c.mask_rle).map_err(|e| BackendError::Fatal(e.to_string()))?;
                Ok(SegmenterCandidate { mask, score: c.score })
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct FixtureVlm(FixtureStore);

impl FixtureVlm {
    pub fn new(root: impl AsRef<Path>) -> Self {
        FixtureVlm(FixtureStore::new(root.as_ref()))
    }
}

impl VlmBackend for FixtureVlm {
    fn id(&self) -> String {
        "fixture-vlm".into()
    }

    fn complete(&self, req: &VlmRequest) -> Result<String, BackendError> {
        let v = self.0.read("vlm", &req.hash())?;
        v["text"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| BackendError::Fatal("vlm fixture without text".into()))
    }
}

#[derive(Debug, Clone)]
pub struct FixtureDetector(FixtureStore);

impl FixtureDetector {
    pub fn new(root: impl AsRef<Path>) -> Self {
        FixtureDetector(FixtureStore::new(root.as_ref()))
    }
}

impl DetectorBackend for FixtureDetector {
    fn id(&self) -> String {
        "fixture-detector".into()
    }

    fn detect(&self, image: &ImageInput, text: &str) -> Result<Option<[f64; 4]>, BackendError> {
        let v = self.0.read("detector", &FixtureStore::detector_key(image, text))?;
        serde_json::from_value(v["box"].clone()).map_err(|e| BackendError::Fatal(format!("bad detector fixture: {e}")))
    }
}

#[derive(Debug, Clone)]
pub struct FixtureSegmenter(FixtureStore);

impl FixtureSegmenter {
    pub fn new(root: impl AsRef<Path>) -> Self {
        FixtureSegmenter(FixtureStore::new(root.as_ref()))
    }
}

impl SegmenterBackend for FixtureSegmenter {
    fn id(&self) -> String {
        "fixture-segmenter".into()
    }

    fn segment_box(&self, image: &ImageInput, bbox: &BoundingBox) -> Result<Vec<SegmenterCandidate>, BackendError> {
        self.0.candidates(&FixtureStore::box_key(image, bbox))
    }

    fn segment_points(&self, image: &ImageInput, points: &[(u32, u32)]) -> Result<Vec<SegmenterCandidate>, BackendError> {
        self.0.candidates(&FixtureStore::points_key(image, points))
    }
}
