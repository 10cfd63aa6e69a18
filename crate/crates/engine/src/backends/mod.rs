//! Clients for the three external services the engine consumes: a
//! vision-language model, an open-vocabulary detector and a promptable
//! segmenter.
//!
//! Backends implement small raw traits; the free functions here add request
//! validation, retry with exponential backoff, response parsing and
//! dimension checks, so every backend behaves the same to the stages.

pub mod http;
pub mod mock;

use std::collections::HashSet;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use convseg_core::{BinaryMask, BoundingBox, ConceptFamily};
use image::RgbImage;
use log::{debug, warn};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::templates::TemplateKind;

pub const MAX_REQUEST_IMAGES: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    /// Worth retrying: timeouts, connection resets, 429 and 5xx replies.
    #[error("transient backend failure: {0}")]
    Transient(String),
    #[error("backend failure: {0}")]
    Fatal(String),
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("unparseable response ({message}): {raw:?}")]
    Parse { raw: String, message: String },
    #[error("no detection for {text:?}")]
    NoDetection { text: String },
    #[error("segmenter returned no candidate")]
    NoCandidate,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("result is {got_h}x{got_w}, image is {h}x{w}")]
    Dimension { h: usize, w: usize, got_h: usize, got_w: usize },
    /// The run was cancelled before the call was made.
    #[error("cancelled")]
    Cancelled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseSchema {
    FreeText,
    JsonObject,
    AcceptReject,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accept,
    Reject,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Accept => "accept",
            Verdict::Reject => "reject",
        }
    }
}

/// An image handed to a backend, with the id mocks key on and a digest of its
/// pixels used in cache keys.
#[derive(Debug, Clone)]
pub struct ImageInput {
    pub image_id: String,
    pub rgb: RgbImage,
    pub digest: String,
}

impl ImageInput {
    pub fn new(image_id: impl Into<String>, rgb: RgbImage) -> Self {
        let digest = image_digest(&rgb);
        ImageInput {
            image_id: image_id.into(),
            rgb,
            digest,
        }
    }

    pub fn height(&self) -> usize {
        self.rgb.height() as usize
    }

    pub fn width(&self) -> usize {
        self.rgb.width() as usize
    }
}

/// SHA-256 over the dimensions and raw RGB bytes.
pub fn image_digest(rgb: &RgbImage) -> String {
    let mut h = Sha256::new();
    h.update(rgb.width().to_le_bytes());
    h.update(rgb.height().to_le_bytes());
    h.update(rgb.as_raw());
    hex(&h.finalize())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// What a request is for. Mocks route on it; live clients ignore it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestTag {
    pub kind: TemplateKind,
    pub image_id: String,
    pub concept: Option<ConceptFamily>,
}

#[derive(Debug, Clone)]
pub struct VlmRequest {
    pub system_text: String,
    pub user_text: Option<String>,
    pub images: Vec<RgbImage>,
    pub response_schema: ResponseSchema,
    pub tag: RequestTag,
    /// Forwarded to backends that support seeded sampling.
    pub seed: Option<u64>,
}

impl VlmRequest {
    pub fn validate(&self) -> Result<(), BackendError> {
        let has_text = self.user_text.as_deref().is_some_and(|t| !t.trim().is_empty());
        if !has_text && self.images.is_empty() {
            return Err(BackendError::InvalidRequest("request has neither user text nor images".into()));
        }
        if self.images.len() > MAX_REQUEST_IMAGES {
            return Err(BackendError::InvalidRequest(format!(
                "{} images, at most {MAX_REQUEST_IMAGES} allowed",
                self.images.len()
            )));
        }
        Ok(())
    }

    /// Key-sorted JSON with images replaced by their digests.
    pub fn canonical_json(&self) -> Value {
        let images: Vec<Value> = self
            .images
            .iter()
            .map(|i| {
                serde_json::json!({
                    "width": i.width(),
                    "height": i.height(),
                    "sha256": image_digest(i),
                })
            })
            .collect();
        serde_json::json!({
            "system_text": self.system_text,
            "user_text": self.user_text,
            "images": images,
            "response_schema": self.response_schema,
            "tag": self.tag,
            "seed": self.seed,
        })
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.canonical_json().to_string().as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VlmResponse {
    pub text: String,
    /// Present exactly when the schema asked for structure and parsing worked.
    pub parsed: Option<Value>,
    pub latency_ms: u64,
}

impl VlmResponse {
    pub fn verdict(&self) -> Option<Verdict> {
        match self.parsed.as_ref()?.as_str()? {
            "accept" => Some(Verdict::Accept),
            "reject" => Some(Verdict::Reject),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmenterCandidate {
    pub mask: BinaryMask,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Detection {
    pub bbox: BoundingBox,
    /// The backend's box reached outside the image and was clipped.
    pub clamped: bool,
}

fn default_timeout_ms() -> u64 {
    60_000
}

fn default_max_retries() -> u32 {
    3
}

fn default_backoff_ms() -> u64 {
    500
}

/// Where a backend lives and how hard to try. The endpoint scheme selects the
/// implementation: `http://` or `https://` for live services, `mock://synthetic`
/// for the pixel-analysing mocks, `fixture://<dir>` for recorded responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub endpoint: String,
    /// Name of the environment variable holding the API key, never the key.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    /// First retry delay; doubles on every further attempt.
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    /// Mocks only.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Model name sent to live endpoints that host several.
    #[serde(default)]
    pub model: Option<String>,
    /// Extra fields merged verbatim into live request bodies.
    #[serde(default)]
    pub options: serde_json::Map<String, Value>,
}

impl BackendConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        BackendConfig {
            endpoint: endpoint.into(),
            api_key_env: None,
            timeout_ms: default_timeout_ms(),
            max_retries: default_max_retries(),
            backoff_ms: default_backoff_ms(),
            seed: None,
            model: None,
            options: serde_json::Map::new(),
        }
    }

    pub fn mock(seed: u64) -> Self {
        BackendConfig {
            seed: Some(seed),
            backoff_ms: 0,
            ..BackendConfig::new("mock://synthetic")
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.timeout_ms == 0 {
            return Err("timeout_ms must be positive".into());
        }
        match self.endpoint_kind() {
            Some(_) => Ok(()),
            None => Err(format!("unsupported endpoint `{}`", self.endpoint)),
        }
    }

    pub fn endpoint_kind(&self) -> Option<EndpointKind> {
        let e = self.endpoint.as_str();
        if e.starts_with("http://") || e.starts_with("https://") {
            Some(EndpointKind::Http)
        } else if e == "mock://synthetic" {
            Some(EndpointKind::Synthetic)
        } else {
            e.strip_prefix("fixture://")
                .filter(|d| !d.is_empty())
                .map(|d| EndpointKind::Fixture(PathBuf::from(d)))
        }
    }

    pub fn api_key(&self) -> Option<String> {
        self.api_key_env.as_ref().and_then(|v| std::env::var(v).ok())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EndpointKind {
    Http,
    Synthetic,
    Fixture(PathBuf),
}

pub trait VlmBackend: Send + Sync {
    fn id(&self) -> String;
    fn complete(&self, req: &VlmRequest) -> Result<String, BackendError>;
}

pub trait DetectorBackend: Send + Sync {
    fn id(&self) -> String;
    /// Raw `[x_min, y_min, x_max, y_max]` in pixels, unclamped; `None` when
    /// nothing matches the text.
    fn detect(&self, image: &ImageInput, text: &str) -> Result<Option<[f64; 4]>, BackendError>;
}

pub trait SegmenterBackend: Send + Sync {
    fn id(&self) -> String;
    fn segment_box(&self, image: &ImageInput, bbox: &BoundingBox) -> Result<Vec<SegmenterCandidate>, BackendError>;
    /// Candidates for a set of point prompts, at most one per point.
    fn segment_points(&self, image: &ImageInput, points: &[(u32, u32)]) -> Result<Vec<SegmenterCandidate>, BackendError>;
}

/// The three backends with their configurations.
#[derive(Clone)]
pub struct Backends {
    pub vlm: Arc<dyn VlmBackend>,
    pub vlm_cfg: BackendConfig,
    pub detector: Arc<dyn DetectorBackend>,
    pub detector_cfg: BackendConfig,
    pub segmenter: Arc<dyn SegmenterBackend>,
    pub segmenter_cfg: BackendConfig,
}

impl Backends {
    /// Instantiates each backend from its endpoint.
    pub fn from_configs(vlm: BackendConfig, detector: BackendConfig, segmenter: BackendConfig) -> Result<Self, String> {
        let seed = |c: &BackendConfig| c.seed.unwrap_or(0);
        let v: Arc<dyn VlmBackend> = match vlm.endpoint_kind() {
            Some(EndpointKind::Http) => Arc::new(http::HttpVlm::new(&vlm).map_err(|e| e.to_string())?),
            Some(EndpointKind::Synthetic) => Arc::new(mock::SyntheticVlm::new(seed(&vlm))),
            Some(EndpointKind::Fixture(dir)) => Arc::new(mock::FixtureVlm::new(dir)),
            None => return Err(format!("unsupported VLM endpoint `{}`", vlm.endpoint)),
        };
        let d: Arc<dyn DetectorBackend> = match detector.endpoint_kind() {
            Some(EndpointKind::Http) => Arc::new(http::HttpDetector::new(&detector).map_err(|e| e.to_string())?),
            Some(EndpointKind::Synthetic) => Arc::new(mock::SyntheticDetector),
            Some(EndpointKind::Fixture(dir)) => Arc::new(mock::FixtureDetector::new(dir)),
            None => return Err(format!("unsupported detector endpoint `{}`", detector.endpoint)),
        };
        let s: Arc<dyn SegmenterBackend> = match segmenter.endpoint_kind() {
            Some(EndpointKind::Http) => Arc::new(http::HttpSegmenter::new(&segmenter).map_err(|e| e.to_string())?),
            Some(EndpointKind::Synthetic) => Arc::new(mock::SyntheticSegmenter),
            Some(EndpointKind::Fixture(dir)) => Arc::new(mock::FixtureSegmenter::new(dir)),
            None => return Err(format!("unsupported segmenter endpoint `{}`", segmenter.endpoint)),
        };
        Ok(Backends {
            vlm: v,
            vlm_cfg: vlm,
            detector: d,
            detector_cfg: detector,
            segmenter: s,
            segmenter_cfg: segmenter,
        })
    }

    /// Synthetic mocks for all three services.
    pub fn synthetic(seed: u64) -> Self {
        Backends::from_configs(BackendConfig::mock(seed), BackendConfig::mock(seed), BackendConfig::mock(seed))
            .expect("mock endpoints are valid")
    }
}

/// Runs `op` until it succeeds, fails permanently, or `max_retries` retries of
/// transient failures are used up. Waits `backoff_ms · 2^k` before retry `k+1`.
pub fn with_retry<T>(
    cfg: &BackendConfig,
    what: &str,
    mut op: impl FnMut() -> Result<T, BackendError>,
) -> Result<T, BackendError> {
    let mut attempt: u32 = 0;
    loop {
        attempt += 1;
        match op() {
            Err(BackendError::Transient(msg)) => {
                if attempt > cfg.max_retries {
                    warn!("{what}: giving up after {attempt} attempts: {msg}");
                    return Err(BackendError::RetriesExhausted { attempts: attempt, last: msg });
                }
                let delay = cfg.backoff_ms.saturating_mul(1u64 << (attempt - 1).min(20));
                warn!("{what}: attempt {attempt} failed ({msg}), retrying in {delay} ms");
                if delay > 0 {
                    std::thread::sleep(Duration::from_millis(delay));
                }
            }
            other => {
                debug!("{what}: finished after {attempt} attempt(s)");
                return other;
            }
        }
    }
}

/// Strips a surrounding Markdown code fence, if any.
fn strip_fence(text: &str) -> &str {
    let t = text.trim();
    let Some(rest) = t.strip_prefix("```") else {
        return t;
    };
    let rest = rest.split_once('\n').map_or("", |(_, body)| body);
    rest.trim_end().strip_suffix("```").unwrap_or(rest).trim()
}

/// Accepts exactly `accept` or `reject` (case-insensitive, optionally quoted
/// or followed by a period) or a JSON object with such a `verdict` field.
pub fn parse_verdict(text: &str) -> Option<Verdict> {
    let body = strip_fence(text);
    if let Ok(Value::Object(map)) = serde_json::from_str::<Value>(body) {
        return map.get("verdict").and_then(Value::as_str).and_then(parse_verdict);
    }
    let word = body
        .trim_matches(|c: char| c == '"' || c == '\'' || c == '*' || c.is_whitespace())
        .trim_end_matches('.')
        .to_ascii_lowercase();
    match word.as_str() {
        "accept" => Some(Verdict::Accept),
        "reject" => Some(Verdict::Reject),
        _ => None,
    }
}

pub fn parse_response(text: String, schema: ResponseSchema, latency_ms: u64) -> Result<VlmResponse, BackendError> {
    let parsed = match schema {
        ResponseSchema::FreeText => None,
        ResponseSchema::JsonObject => match serde_json::from_str::<Value>(strip_fence(&text)) {
            Ok(v @ Value::Object(_)) => Some(v),
            Ok(_) => {
                return Err(BackendError::Parse {
                    raw: text,
                    message: "expected a JSON object".into(),
                })
            }
            Err(e) => {
                return Err(BackendError::Parse {
                    raw: text,
                    message: e.to_string(),
                })
            }
        },
        ResponseSchema::AcceptReject => match parse_verdict(&text) {
            Some(v) => Some(Value::String(v.as_str().into())),
            None => {
                return Err(BackendError::Parse {
                    raw: text,
                    message: "expected accept or reject".into(),
                })
            }
        },
    };
    Ok(VlmResponse {
        text,
        parsed,
        latency_ms,
    })
}

pub fn vlm_complete(cfg: &BackendConfig, vlm: &dyn VlmBackend, req: &VlmRequest) -> Result<VlmResponse, BackendError> {
    req.validate()?;
    let start = Instant::now();
    let text = with_retry(cfg, &format!("vlm {}", vlm.id()), || vlm.complete(req))?;
    parse_response(text, req.response_schema, start.elapsed().as_millis() as u64)
}

/// Clips the backend's box to the image; degenerate boxes count as no detection.
pub fn clamp_detection(raw: [f64; 4], image: &ImageInput, text: &str) -> Result<Detection, BackendError> {
    let (w, h) = (image.rgb.width(), image.rgb.height());
    match BoundingBox::clamp_from_f64(raw[0], raw[1], raw[2], raw[3], w, h) {
        Some((bbox, clamped)) => {
            if clamped {
                warn!("box {raw:?} for {text:?} clamped to {w}x{h} image {}", image.image_id);
            }
            Ok(Detection { bbox, clamped })
        }
        None => Err(BackendError::NoDetection { text: text.to_string() }),
    }
}

pub fn detect_region(
    cfg: &BackendConfig,
    detector: &dyn DetectorBackend,
    image: &ImageInput,
    text: &str,
) -> Result<Detection, BackendError> {
    if text.trim().is_empty() {
        return Err(BackendError::InvalidRequest("empty detection text".into()));
    }
    let raw = with_retry(cfg, &format!("detector {}", detector.id()), || detector.detect(image, text))?;
    match raw {
        Some(r) => clamp_detection(r, image, text),
        None => Err(BackendError::NoDetection { text: text.to_string() }),
    }
}

fn check_candidates(image: &ImageInput, cands: &[SegmenterCandidate]) -> Result<(), BackendError> {
    for c in cands {
        if c.mask.dims() != (image.height(), image.width()) {
            return Err(BackendError::Dimension {
                h: image.height(),
                w: image.width(),
                got_h: c.mask.height(),
                got_w: c.mask.width(),
            });
        }
        if !c.score.is_finite() {
            return Err(BackendError::Fatal(format!("non-finite candidate score {}", c.score)));
        }
    }
    Ok(())
}

/// Highest-scoring candidate for a box prompt; the first one wins ties.
pub fn select_best(cands: Vec<SegmenterCandidate>) -> Option<SegmenterCandidate> {
    let mut best: Option<SegmenterCandidate> = None;
    for c in cands {
        if best.as_ref().is_none_or(|b| c.score > b.score) {
            best = Some(c);
        }
    }
    best
}

pub fn segment_from_box(
    cfg: &BackendConfig,
    segmenter: &dyn SegmenterBackend,
    image: &ImageInput,
    bbox: &BoundingBox,
) -> Result<SegmenterCandidate, BackendError> {
    if !bbox.is_valid_for(image.rgb.width(), image.rgb.height()) {
        return Err(BackendError::InvalidRequest(format!("box {bbox:?} outside image")));
    }
    let cands = with_retry(cfg, &format!("segmenter {}", segmenter.id()), || segmenter.segment_box(image, bbox))?;
    check_candidates(image, &cands)?;
    select_best(cands).ok_or(BackendError::NoCandidate)
}

/// Drops later candidates whose mask equals an earlier one.
pub fn dedup_candidates(cands: Vec<SegmenterCandidate>) -> Vec<SegmenterCandidate> {
    let mut seen = HashSet::new();
    cands.into_iter().filter(|c| seen.insert(c.mask.clone())).collect()
}

pub fn segment_from_grid(
    cfg: &BackendConfig,
    segmenter: &dyn SegmenterBackend,
    image: &ImageInput,
    points: &[(u32, u32)],
) -> Result<Vec<SegmenterCandidate>, BackendError> {
    if points.is_empty() {
        return Err(BackendError::InvalidRequest("empty point grid".into()));
    }
    let (w, h) = image.rgb.dimensions();
    if let Some(p) = points.iter().find(|(x, y)| *x >= w || *y >= h) {
        return Err(BackendError::InvalidRequest(format!("point {p:?} outside {w}x{h} image")));
    }
    let cands = with_retry(cfg, &format!("segmenter {}", segmenter.id()), || {
        segmenter.segment_points(image, points)
    })?;
    check_candidates(image, &cands)?;
    Ok(dedup_candidates(cands))
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicU32, Ordering};

    use super::*;

    fn tag() -> RequestTag {
        RequestTag {
            kind: TemplateKind::MaskVerify,
            image_id: "img".into(),
            concept: None,
        }
    }

    fn request(schema: ResponseSchema) -> VlmRequest {
        VlmRequest {
            system_text: "sys".into(),
            user_text: Some("hello".into()),
            images: vec![RgbImage::new(2, 2)],
            response_schema: schema,
            tag: tag(),
            seed: Some(1),
        }
    }

    struct Flaky {
        failures: u32,
        calls: AtomicU32,
    }

    impl VlmBackend for Flaky {
        fn id(&self) -> String {
            "flaky".into()
        }

        fn complete(&self, _: &VlmRequest) -> Result<String, BackendError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.failures {
                Err(BackendError::Transient("503".into()))
            } else {
                Ok("Accept.".into())
            }
        }
    }

    fn cfg(max_retries: u32) -> BackendConfig {
        BackendConfig {
            max_retries,
            backoff_ms: 0,
            ..BackendConfig::new("mock://synthetic")
        }
    }

    #[test]
    fn retries_transient_failures_up_to_the_limit() {
        let ok = Flaky {
            failures: 2,
            calls: AtomicU32::new(0),
        };
        let r = vlm_complete(&cfg(2), &ok, &request(ResponseSchema::AcceptReject)).unwrap();
        assert_eq!(r.verdict(), Some(Verdict::Accept));
        assert_eq!(ok.calls.load(Ordering::SeqCst), 3);

        let bad = Flaky {
            failures: 10,
            calls: AtomicU32::new(0),
        };
        let e = vlm_complete(&cfg(2), &bad, &request(ResponseSchema::AcceptReject)).unwrap_err();
        assert_eq!(
            e,
            BackendError::RetriesExhausted {
                attempts: 3,
                last: "503".into()
            }
        );
        assert_eq!(bad.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn verdict_parsing_is_strict() {
        for ok in ["accept", "Accept.", " \"REJECT\" ", "```\naccept\n```", "{\"verdict\": \"reject\"}"] {
            assert!(parse_verdict(ok).is_some(), "{ok}");
        }
        for bad in ["yes", "accept it", "I would accept", "", "{\"verdict\": 1}"] {
            assert!(parse_verdict(bad).is_none(), "{bad}");
        }
    }

    #[test]
    fn json_schema_errors_carry_raw_text() {
        match parse_response("{not json".into(), ResponseSchema::JsonObject, 0) {
            Err(BackendError::Parse { raw, .. }) => assert_eq!(raw, "{not json"),
            other => panic!("{other:?}"),
        }
        let r = parse_response("```json\n{\"a\": 1}\n```".into(), ResponseSchema::JsonObject, 0).unwrap();
        assert_eq!(r.parsed.unwrap()["a"], 1);
        assert!(parse_response("[1]".into(), ResponseSchema::JsonObject, 0).is_err());
        assert!(parse_response("x".into(), ResponseSchema::FreeText, 0).unwrap().parsed.is_none());
    }

    #[test]
    fn requests_need_text_or_images() {
        let mut r = request(ResponseSchema::FreeText);
        r.user_text = None;
        assert!(r.validate().is_ok());
        r.images.clear();
        assert!(r.validate().is_err());
        r.user_text = Some("hi".into());
        r.images = vec![RgbImage::new(1, 1); 5];
        assert!(r.validate().is_err());
    }

    #[test]
    fn request_hash_depends_on_content_only() {
        let a = request(ResponseSchema::FreeText);
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.images[0].put_pixel(0, 0, image::Rgb([1, 0, 0]));
        assert_ne!(a.hash(), b.hash());
        let mut c = a.clone();
        c.seed = Some(2);
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn out_of_bounds_boxes_are_clamped() {
        let img = ImageInput::new("i", RgbImage::new(10, 8));
        let d = clamp_detection([-3.0, 2.0, 14.0, 6.0], &img, "x").unwrap();
        assert_eq!(d.bbox, BoundingBox::new(0, 2, 10, 6));
        assert!(d.clamped);
        assert!(clamp_detection([12.0, 0.0, 20.0, 4.0], &img, "x").is_err());
        assert!(!clamp_detection([1.0, 1.0, 3.0, 3.0], &img, "x").unwrap().clamped);
    }

    #[test]
    fn best_candidate_prefers_first_on_ties() {
        let m = |v| BinaryMask::from_fn(2, 2, move |y, _| y == v);
        let best = select_best(vec![
            SegmenterCandidate { mask: m(0), score: 0.5 },
            SegmenterCandidate { mask: m(1), score: 0.9 },
            SegmenterCandidate { mask: m(0), score: 0.9 },
        ])
        .unwrap();
        assert_eq!(best.mask, m(1));
        let d = dedup_candidates(vec![
            SegmenterCandidate { mask: m(0), score: 0.1 },
            SegmenterCandidate { mask: m(0), score: 0.8 },
            SegmenterCandidate { mask: m(1), score: 0.2 },
        ]);
        assert_eq!(d.len(), 2);
        assert_eq!(d[0].score, 0.1);
    }

    #[test]
    fn endpoint_schemes() {
        assert_eq!(BackendConfig::new("https://x").endpoint_kind(), Some(EndpointKind::Http));
        assert_eq!(
            BackendConfig::new("fixture://fx").endpoint_kind(),
            Some(EndpointKind::Fixture(PathBuf::from("fx")))
        );
        assert!(BackendConfig::new("ftp://x").validate().is_err());
        let zero = BackendConfig {
            timeout_ms: 0,
            ..BackendConfig::mock(0)
        };
        assert!(zero.validate().is_err());
        let json = r#"{"endpoint": "mock://synthetic", "colour": 1}"#;
        assert!(serde_json::from_str::<BackendConfig>(json).is_err());
    }
}
