//! Content-addressed cache of raw backend outputs.
//!
//! Entries live at `<dir>/<aa>/<sha256>.json` and are written atomically, so a
//! run killed mid-write leaves either no entry or a complete one. Keys hash
//! the operation, the backend id and the canonical request, which includes
//! image digests rather than pixels.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use convseg_core::{rle_decode, rle_encode, BoundingBox, MaskRle};
use log::warn;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::backends::{
    sha256_hex, BackendError, Backends, DetectorBackend, ImageInput, SegmenterBackend, SegmenterCandidate,
    VlmBackend, VlmRequest,
};
use crate::fsutil::write_atomic;

#[derive(Debug, Clone)]
pub struct CallCache {
    dir: PathBuf,
}

impl CallCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        CallCache { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn key(op: &str, backend: &str, request: &Value) -> String {
        let canonical = json!({"op": op, "backend": backend, "request": request});
        sha256_hex(canonical.to_string().as_bytes())
    }

    pub fn path(&self, key: &str) -> PathBuf {
        self.dir.join(&key[..2]).join(format!("{key}.json"))
    }

    /// A missing or unreadable entry is a miss.
    pub fn get<T: DeserializeOwned>(&self, key: &str) -> Option<T> {
        let path = self.path(key);
        let bytes = std::fs::read(&path).ok()?;
        match serde_json::from_slice(&bytes) {
            Ok(v) => Some(v),
            Err(e) => {
                warn!("ignoring corrupt cache entry {}: {e}", path.display());
                None
            }
        }
    }

    pub fn put<T: Serialize>(&self, key: &str, value: &T) {
        let bytes = serde_json::to_vec(value).expect("cache value serializes");
        if let Err(e) = write_atomic(&self.path(key), &bytes) {
            warn!("cache write failed: {e}");
        }
    }
}

/// Call counters and the cancellation flag shared by all cached backends.
#[derive(Debug, Default)]
pub struct CallControl {
    cancelled: AtomicBool,
    vlm: AtomicU64,
    detector: AtomicU64,
    segmenter: AtomicU64,
    hits: AtomicU64,
    misses: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallStats {
    /// Attempts that reached a backend, retries included.
    pub vlm_calls: u64,
    pub detector_calls: u64,
    pub segmenter_calls: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
}

impl CallStats {
    pub fn backend_calls(&self) -> u64 {
        self.vlm_calls + self.detector_calls + self.segmenter_calls
    }
}

impl CallControl {
    pub fn cancel(&self) {
        self.cancelled.store(true, Ordering::SeqCst);
    }

    pub fn is_cancelled(&self) -> bool {
        self.cancelled.load(Ordering::SeqCst)
    }

    pub fn stats(&self) -> CallStats {
        CallStats {
            vlm_calls: self.vlm.load(Ordering::SeqCst),
            detector_calls: self.detector.load(Ordering::SeqCst),
            segmenter_calls: self.segmenter.load(Ordering::SeqCst),
            cache_hits: self.hits.load(Ordering::SeqCst),
            cache_misses: self.misses.load(Ordering::SeqCst),
        }
    }

    /// Looks `key` up; on a miss checks cancellation and counts the call.
    fn lookup<T: DeserializeOwned>(
        &self,
        cache: Option<&CallCache>,
        key: &str,
        counter: &AtomicU64,
    ) -> Result<Option<T>, BackendError> {
        if let Some(hit) = cache.and_then(|c| c.get(key)) {
            self.hits.fetch_add(1, Ordering::SeqCst);
            return Ok(Some(hit));
        }
        if self.is_cancelled() {
            return Err(BackendError::Cancelled);
        }
        self.misses.fetch_add(1, Ordering::SeqCst);
        counter.fetch_add(1, Ordering::SeqCst);
        Ok(None)
    }
}

#[derive(Serialize, Deserialize)]
struct CachedText {
    text: String,
}

#[derive(Serialize, Deserialize)]
struct CachedCandidate {
    mask: MaskRle,
    score: f64,
}

struct CachedVlm {
    inner: Arc<dyn VlmBackend>,
    cache: Option<CallCache>,
    control: Arc<CallControl>,
}

impl VlmBackend for CachedVlm {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn complete(&self, req: &VlmRequest) -> Result<String, BackendError> {
        let key = CallCache::key("vlm", &self.inner.id(), &req.canonical_json());
        if let Some(hit) = self.control.lookup::<CachedText>(self.cache.as_ref(), &key, &self.control.vlm)? {
            return Ok(hit.text);
        }
        let text = self.inner.complete(req)?;
        if let Some(c) = &self.cache {
            c.put(&key, &CachedText { text: text.clone() });
        }
        Ok(text)
    }
}

struct CachedDetector {
    inner: Arc<dyn DetectorBackend>,
    cache: Option<CallCache>,
    control: Arc<CallControl>,
}

impl DetectorBackend for CachedDetector {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn detect(&self, image: &ImageInput, text: &str) -> Result<Option<[f64; 4]>, BackendError> {
        let request = json!({"image": image.digest, "text": text});
        let key = CallCache::key("detect", &self.inner.id(), &request);
        let cached = self
            .control
            .lookup::<Option<[f64; 4]>>(self.cache.as_ref(), &key, &self.control.detector)?;
        if let Some(hit) = cached {
            return Ok(hit);
        }
        let out = self.inner.detect(image, text)?;
        if let Some(c) = &self.cache {
            c.put(&key, &out);
        }
        Ok(out)
    }
}

struct CachedSegmenter {
    inner: Arc<dyn SegmenterBackend>,
    cache: Option<CallCache>,
    control: Arc<CallControl>,
}

impl CachedSegmenter {
    fn call(
        &self,
        op: &str,
        request: Value,
        run: impl FnOnce() -> Result<Vec<SegmenterCandidate>, BackendError>,
    ) -> Result<Vec<SegmenterCandidate>, BackendError> {
        let key = CallCache::key(op, &self.inner.id(), &request);
        let cached = self
            .control
            .lookup::<Vec<CachedCandidate>>(self.cache.as_ref(), &key, &self.control.segmenter)?;
        if let Some(hit) = cached {
            return hit
                .into_iter()
                .map(|c| {
                    let mask = rle_decode(&c.mask).map_err(|e| BackendError::Fatal(format!("cache entry: {e}")))?;
                    Ok(SegmenterCandidate { mask, score: c.score })
                })
                .collect();
        }
        let out = run()?;
        if let Some(c) = &self.cache {
            let entry: Vec<CachedCandidate> = out
                .iter()
                .map(|c| CachedCandidate {
                    mask: rle_encode(&c.mask),
                    score: c.score,
                })
                .collect();
            c.put(&key, &entry);
        }
        Ok(out)
    }
}

impl SegmenterBackend for CachedSegmenter {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn segment_box(&self, image: &ImageInput, bbox: &BoundingBox) -> Result<Vec<SegmenterCandidate>, BackendError> {
        let request = json!({"image": image.digest, "box": bbox});
        self.call("segment_box", request, || self.inner.segment_box(image, bbox))
    }

    fn segment_points(&self, image: &ImageInput, points: &[(u32, u32)]) -> Result<Vec<SegmenterCandidate>, BackendError> {
        let request = json!({"image": image.digest, "points": points});
        self.call("segment_points", request, || self.inner.segment_points(image, points))
    }
}

/// Wraps every backend so calls are cached (when `cache` is set), counted and
/// refused once `control` is cancelled.
pub fn instrument(backends: Backends, cache: Option<CallCache>, control: Arc<CallControl>) -> Backends {
    Backends {
        vlm: Arc::new(CachedVlm {
            inner: backends.vlm,
            cache: cache.clone(),
            control: control.clone(),
        }),
        vlm_cfg: backends.vlm_cfg,
        detector: Arc::new(CachedDetector {
            inner: backends.detector,
            cache: cache.clone(),
            control: control.clone(),
        }),
        detector_cfg: backends.detector_cfg,
        segmenter: Arc::new(CachedSegmenter {
            inner: backends.segmenter,
            cache,
            control,
        }),
        segmenter_cfg: backends.segmenter_cfg,
    }
}
