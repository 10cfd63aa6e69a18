//! Blocking HTTP clients for live services.
//!
//! The VLM client speaks the chat-completions JSON shape with images inlined
//! as base64 PNG data URLs. The detector expects normalized box corners back;
//! the segmenter exchanges masks as COCO uncompressed RLE.

use std::io::Cursor;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use convseg_core::{rle_decode, BoundingBox, MaskRle};
use image::{ImageFormat, RgbImage};
use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::Deserialize;
use serde_json::{json, Map, Value};

use super::{
    BackendConfig, BackendError, DetectorBackend, ImageInput, ResponseSchema, SegmenterBackend, SegmenterCandidate,
    VlmBackend, VlmRequest,
};

pub fn png_data_url(image: &RgbImage) -> String {
    let mut buf = Cursor::new(Vec::new());
    image.write_to(&mut buf, ImageFormat::Png).expect("PNG encoding into memory");
    format!("data:image/png;base64,{}", STANDARD.encode(buf.into_inner()))
}

/// Shared transport: JSON POST with bearer auth and error classification.
#[derive(Debug, Clone)]
struct Transport {
    client: Client,
    api_key: Option<String>,
    options: Map<String, Value>,
}

impl Transport {
    fn new(cfg: &BackendConfig) -> Result<Self, BackendError> {
        cfg.validate().map_err(BackendError::InvalidRequest)?;
        let client = Client::builder()
            .timeout(Duration::from_millis(cfg.timeout_ms))
            .build()
            .map_err(|e| BackendError::Fatal(e.to_string()))?;
        Ok(Transport {
            client,
            api_key: cfg.api_key(),
            options: cfg.options.clone(),
        })
    }

    fn post(&self, url: &str, mut body: Value) -> Result<Value, BackendError> {
        if let Value::Object(map) = &mut body {
            for (k, v) in &self.options {
                map.insert(k.clone(), v.clone());
            }
        }
        let mut rb = self.client.post(url).json(&body);
        if let Some(key) = &self.api_key {
            rb = rb.bearer_auth(key);
        }
        let resp = rb.send().map_err(|e| {
            if e.is_timeout() || e.is_connect() || e.is_request() {
                BackendError::Transient(e.to_string())
            } else {
                BackendError::Fatal(e.to_string())
            }
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| BackendError::Transient(e.to_string()))?;
        if status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error() {
            return Err(BackendError::Transient(format!("HTTP {status}: {}", truncate(&text))));
        }
        if !status.is_success() {
            return Err(BackendError::Fatal(format!("HTTP {status}: {}", truncate(&text))));
        }
        serde_json::from_str(&text).map_err(|e| BackendError::Parse {
            raw: text,
            message: e.to_string(),
        })
    }
}

fn truncate(s: &str) -> &str {
    match s.char_indices().nth(300) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

#[derive(Debug, Clone)]
pub struct HttpVlm {
    transport: Transport,
    endpoint: String,
    model: Option<String>,
}

impl HttpVlm {
    pub fn new(cfg: &BackendConfig) -> Result<Self, BackendError> {
        Ok(HttpVlm {
            transport: Transport::new(cfg)?,
            endpoint: cfg.endpoint.clone(),
            model: cfg.model.clone(),
        })
    }

    pub fn request_body(&self, req: &VlmRequest) -> Value {
        let mut content = Vec::new();
        if let Some(t) = &req.user_text {
            content.push(json!({ "type": "text", "text": t }));
        }
        for img in &req.images {
            content.push(json!({ "type": "image_url", "image_url": { "url": png_data_url(img) } }));
        }
        let mut messages = Vec::new();
        if !req.system_text.is_empty() {
            messages.push(json!({ "role": "system", "content": req.system_text }));
        }
        messages.push(json!({ "role": "user", "content": content }));
        let mut body = json!({ "messages": messages });
        if let Some(m) = &self.model {
            body["model"] = json!(m);
        }
        if req.response_schema == ResponseSchema::JsonObject {
            body["response_format"] = json!({ "type": "json_object" });
        }
        if let Some(s) = req.seed {
            body["seed"] = json!(s);
        }
        body
    }
}

impl VlmBackend for HttpVlm {
    fn id(&self) -> String {
        format!("http-vlm({}{})", self.endpoint, self.model.as_deref().map(|m| format!(",{m}")).unwrap_or_default())
    }

    fn complete(&self, req: &VlmRequest) -> Result<String, BackendError> {
        let v = self.transport.post(&self.endpoint, self.request_body(req))?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| BackendError::Parse {
                raw: v.to_string(),
                message: "missing choices[0].message.content".into(),
            })
    }
}

#[derive(Debug, Clone)]
pub struct HttpDetector {
    transport: Transport,
    endpoint: String,
}

#[derive(Deserialize)]
struct DetectedObject {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl HttpDetector {
    pub fn new(cfg: &BackendConfig) -> Result<Self, BackendError> {
        Ok(HttpDetector {
            transport: Transport::new(cfg)?,
            endpoint: cfg.endpoint.clone(),
        })
    }
}

impl DetectorBackend for HttpDetector {
    fn id(&self) -> String {
        format!("http-detector({})", self.endpoint)
    }

    /// Expects `{"objects": [{"x_min", "y_min", "x_max", "y_max"}]}` with
    /// coordinates normalized to `[0, 1]`; the first object is used.
    fn detect(&self, image: &ImageInput, text: &str) -> Result<Option<[f64; 4]>, BackendError> {
        let body = json!({ "image_url": png_data_url(&image.rgb), "object": text });
        let v = self.transport.post(&self.endpoint, body)?;
        let objects: Vec<DetectedObject> =
            serde_json::from_value(v.get("objects").cloned().unwrap_or(Value::Null)).map_err(|e| BackendError::Parse {
                raw: v.to_string(),
                message: e.to_string(),
            })?;
        let (w, h) = (image.rgb.width() as f64, image.rgb.height() as f64);
        Ok(objects.first().map(|o| [o.x_min * w, o.y_min * h, o.x_max * w, o.y_max * h]))
    }
}

#[derive(Debug, Clone)]
pub struct HttpSegmenter {
    transport: Transport,
    endpoint: String,
}

#[derive(Deserialize)]
struct WireCandidate {
    mask_rle: MaskRle,
    score: f64,
}

impl HttpSegmenter {
    pub fn new(cfg: &BackendConfig) -> Result<Self, BackendError> {
        Ok(HttpSegmenter {
            transport: Transport::new(cfg)?,
            endpoint: cfg.endpoint.trim_end_matches('/').to_string(),
        })
    }

    fn candidates(&self, path: &str, body: Value) -> Result<Vec<SegmenterCandidate>, BackendError> {
        let v = self.transport.post(&format!("{}/{path}", self.endpoint), body)?;
        let list: Vec<WireCandidate> = serde_json::from_value(v.get("candidates").cloned().unwrap_or(Value::Null))
            .map_err(|e| BackendError::Parse {
                raw: v.to_string(),
                message: e.to_string(),
            })?;
        list.into_iter()
            .map(|c| {
                let mask = rle_decode(&c.mask_rle).map_err(|e| BackendError::Parse {
                    raw: format!("{:?}", c.mask_rle),
                    message: e.to_string(),
                })?;
                Ok(SegmenterCandidate { mask, score: c.score })
            })
            .collect()
    }
}

impl SegmenterBackend for HttpSegmenter {
    fn id(&self) -> String {
        format!("http-segmenter({})", self.endpoint)
    }

    /// `POST <endpoint>/box` with `{"image", "box": [x_min, y_min, x_max, y_max]}`.
    fn segment_box(&self, image: &ImageInput, bbox: &BoundingBox) -> Result<Vec<SegmenterCandidate>, BackendError> {
        let body = json!({
            "image": png_data_url(&image.rgb),
            "box": [bbox.x_min, bbox.y_min, bbox.x_max, bbox.y_max],
        });
        self.candidates("box", body)
    }

    /// `POST <endpoint>/points` with `{"image", "points": [[x, y], ...]}`.
    fn segment_points(&self, image: &ImageInput, points: &[(u32, u32)]) -> Result<Vec<SegmenterCandidate>, BackendError> {
        let pts: Vec<[u32; 2]> = points.iter().map(|&(x, y)| [x, y]).collect();
        let body = json!({ "image": png_data_url(&image.rgb), "points": pts });
        self.candidates("points", body)
    }
}

#[cfg(test)]
mod tests {
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::mpsc;
    use std::thread;

    use convseg_core::{rle_encode, BinaryMask};

    use super::*;
    use crate::backends::{detect_region, segment_from_box, vlm_complete, RequestTag, Verdict};
    use crate::templates::TemplateKind;

    /// Serves the canned `(status, body)` replies in order, one per connection,
    /// and reports each request's path and JSON body.
    fn serve(replies: Vec<(u16, String)>) -> (String, mpsc::Receiver<(String, Value)>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for (status, body) in replies {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let path = line.split_whitespace().nth(1).unwrap_or("").to_string();
                let mut len = 0;
                loop {
                    let mut h = String::new();
                    reader.read_line(&mut h).unwrap();
                    if h.trim().is_empty() {
                        break;
                    }
                    if let Some(v) = h.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                let _ = tx.send((path, serde_json::from_slice(&buf).unwrap_or(Value::Null)));
                let resp = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(resp.as_bytes()).unwrap();
            }
        });
        (format!("http://{addr}"), rx)
    }

    fn cfg(endpoint: &str) -> BackendConfig {
        BackendConfig {
            backoff_ms: 1,
            max_retries: 2,
            model: Some("m1".into()),
            ..BackendConfig::new(endpoint)
        }
    }

    fn image() -> ImageInput {
        ImageInput::new("img", RgbImage::new(20, 10))
    }

    #[test]
    fn vlm_retries_server_errors_and_parses_verdicts() {
        let ok = json!({ "choices": [{ "message": { "content": "Accept" } }] }).to_string();
        let (url, rx) = serve(vec![(503, "busy".into()), (200, ok)]);
        let c = cfg(&url);
        let vlm = HttpVlm::new(&c).unwrap();
        let req = VlmRequest {
            system_text: "judge".into(),
            user_text: Some("is it a cup?".into()),
            images: vec![image().rgb],
            response_schema: ResponseSchema::AcceptReject,
            tag: RequestTag {
                kind: TemplateKind::MaskVerify,
                image_id: "img".into(),
                concept: None,
            },
            seed: Some(9),
        };
        let r = vlm_complete(&c, &vlm, &req).unwrap();
        assert_eq!(r.verdict(), Some(Verdict::Accept));
        let (_, first) = rx.recv().unwrap();
        let (_, second) = rx.recv().unwrap();
        assert_eq!(first, second);
        assert_eq!(second["model"], "m1");
        assert_eq!(second["seed"], 9);
        let parts = second["messages"][1]["content"].as_array().unwrap();
        assert_eq!(parts[0]["text"], "is it a cup?");
        assert!(parts[1]["image_url"]["url"].as_str().unwrap().starts_with("data:image/png;base64,"));
    }

    #[test]
    fn client_errors_are_not_retried() {
        let (url, rx) = serve(vec![(400, "{\"error\": \"bad\"}".into())]);
        let c = cfg(&url);
        let vlm = HttpVlm::new(&c).unwrap();
        let req = VlmRequest {
            system_text: String::new(),
            user_text: Some("x".into()),
            images: vec![],
            response_schema: ResponseSchema::FreeText,
            tag: RequestTag {
                kind: TemplateKind::Scene,
                image_id: "img".into(),
                concept: None,
            },
            seed: None,
        };
        assert!(matches!(vlm_complete(&c, &vlm, &req), Err(BackendError::Fatal(_))));
        assert_eq!(rx.try_iter().count(), 1);
    }

    #[test]
    fn detector_scales_normalized_boxes_and_clamps() {
        let body = json!({ "objects": [{ "x_min": -0.1, "y_min": 0.2, "x_max": 0.5, "y_max": 0.8 }] }).to_string();
        let (url, rx) = serve(vec![(200, body), (200, "{\"objects\": []}".into())]);
        let c = cfg(&url);
        let det = HttpDetector::new(&c).unwrap();
        let d = detect_region(&c, &det, &image(), "cup").unwrap();
        assert_eq!(d.bbox, BoundingBox::new(0, 2, 10, 8));
        assert!(d.clamped);
        assert_eq!(rx.recv().unwrap().1["object"], "cup");
        assert!(matches!(
            detect_region(&c, &det, &image(), "bowl"),
            Err(BackendError::NoDetection { .. })
        ));
    }

    #[test]
    fn segmenter_decodes_rle_candidates() {
        let img = image();
        let b = BoundingBox::new(2, 2, 6, 5);
        let low = BinaryMask::from_box(10, 20, &BoundingBox::new(0, 0, 2, 2));
        let high = BinaryMask::from_box(10, 20, &b);
        let body = json!({ "candidates": [
            { "mask_rle": rle_encode(&low), "score": 0.2 },
            { "mask_rle": rle_encode(&high), "score": 0.9 },
        ] })
        .to_string();
        let (url, rx) = serve(vec![(200, body)]);
        let c = cfg(&url);
        let seg = HttpSegmenter::new(&c).unwrap();
        let best = segment_from_box(&c, &seg, &img, &b).unwrap();
        assert_eq!(best.mask, high);
        let (path, sent) = rx.recv().unwrap();
        assert_eq!(path, "/box");
        assert_eq!(sent["box"], json!([2, 2, 6, 5]));
    }
}
