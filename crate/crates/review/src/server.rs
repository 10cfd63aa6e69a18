//! JSON HTTP API over a [`ReviewStore`], plus the browser UI at `/`.

use std::io::Cursor;
use std::net::SocketAddr;
use std::path::{Component, Path, PathBuf};
use std::sync::Arc;

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use log::{error, info};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::candidates::{Candidate, Decision};
use crate::error::ReviewError;
use crate::store::{AgreementStats, QueueStats, ReviewStore};

pub const DEFAULT_PORT: u16 = 8701;

const INDEX_HTML: &str = include_str!("../assets/index.html");

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub port: u16,
    /// Static UI assets; the embedded page is served when unset.
    pub ui_dir: Option<PathBuf>,
    /// Where `GET /api/export` also writes the accepted manifest.
    pub export_path: Option<PathBuf>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            port: DEFAULT_PORT,
            ui_dir: None,
            export_path: None,
        }
    }
}

#[derive(Clone)]
struct AppState {
    store: Arc<ReviewStore>,
    ui_dir: Option<PathBuf>,
    export_path: Option<PathBuf>,
}

/// What the UI needs to show one candidate.
#[derive(Debug, Clone, Serialize)]
pub struct CandidateView {
    pub candidate_id: String,
    pub sample_id: String,
    pub image_id: String,
    pub prompt: String,
    pub concept: String,
    pub is_negative: bool,
    pub ai_suggestion: Decision,
    pub overlay_url: String,
    pub plain_url: String,
    pub lease_expires_at: u64,
}

fn encode_component(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for b in s.bytes() {
        if b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.' | b'~') {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

impl CandidateView {
    fn new(c: &Candidate, lease_expires_at: u64) -> Self {
        let base = format!("/api/images/{}", encode_component(&c.candidate_id));
        CandidateView {
            candidate_id: c.candidate_id.clone(),
            sample_id: c.sample.sample_id.clone(),
            image_id: c.sample.image.image_id.clone(),
            prompt: c.sample.prompt.clone(),
            concept: c.sample.concept.as_str().to_string(),
            is_negative: c.sample.is_negative,
            ai_suggestion: c.ai_suggestion,
            overlay_url: format!("{base}?variant=overlay"),
            plain_url: format!("{base}?variant=plain"),
            lease_expires_at,
        }
    }
}

#[derive(Debug, Serialize)]
struct StatsBody {
    #[serde(flatten)]
    queue: QueueStats,
    agreement: Option<AgreementStats>,
}

struct ApiError(StatusCode, String);

impl From<ReviewError> for ApiError {
    fn from(e: ReviewError) -> Self {
        let status = match &e {
            ReviewError::UnknownCandidate(_) => StatusCode::NOT_FOUND,
            ReviewError::Conflict { .. } | ReviewError::NotAssigned { .. } => StatusCode::CONFLICT,
            ReviewError::EmptySession | ReviewError::Input(_) | ReviewError::NoDecisions => StatusCode::BAD_REQUEST,
            ReviewError::Log { .. } | ReviewError::Io { .. } | ReviewError::Manifest(_) => {
                error!("{e}");
                StatusCode::INTERNAL_SERVER_ERROR
            }
        };
        ApiError(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Deserialize)]
struct NextQuery {
    #[serde(default)]
    session: String,
}

async fn next(State(app): State<AppState>, Query(q): Query<NextQuery>) -> ApiResult<Json<Value>> {
    let assignment = app.store.next_candidate(&q.session)?;
    let stats = app.store.stats();
    let view = assignment.map(|a| CandidateView::new(&a.candidate, a.lease.expires_at));
    Ok(Json(json!({
        "candidate": view,
        "decided": stats.decided,
        "total": stats.total,
    })))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct VerdictBody {
    candidate_id: String,
    decision: Decision,
    annotator_id: String,
    #[serde(default)]
    reason: Option<String>,
}

async fn verdict(State(app): State<AppState>, body: Result<Json<VerdictBody>, axum::extract::rejection::JsonRejection>) -> ApiResult<Json<Value>> {
    let Json(body) = body.map_err(|e| ApiError(StatusCode::BAD_REQUEST, e.body_text()))?;
    if body.annotator_id.trim().is_empty() {
        return Err(ReviewError::EmptySession.into());
    }
    let record = app
        .store
        .record_verdict(&body.candidate_id, body.decision, &body.annotator_id, body.reason)?;
    Ok(Json(serde_json::to_value(record).expect("record serializes")))
}

#[derive(Deserialize)]
struct ImageQuery {
    #[serde(default)]
    variant: Option<String>,
}

async fn image(State(app): State<AppState>, UrlPath(id): UrlPath<String>, Query(q): Query<ImageQuery>) -> ApiResult<Response> {
    let c = app.store.candidate(&id).ok_or(ReviewError::UnknownCandidate(id.clone()))?;
    let path = match q.variant.as_deref().unwrap_or("overlay") {
        "overlay" => &c.overlay_uri,
        "plain" => &c.plain_uri,
        other => return Err(ApiError(StatusCode::BAD_REQUEST, format!("unknown variant `{other}`"))),
    };
    let bytes = png_bytes(path)?;
    Ok(([(header::CONTENT_TYPE, "image/png"), (header::CACHE_CONTROL, "no-cache")], bytes).into_response())
}

/// The file as PNG, re-encoding other formats.
fn png_bytes(path: &Path) -> Result<Vec<u8>, ReviewError> {
    let bytes = std::fs::read(path).map_err(|e| ReviewError::io(path, e))?;
    if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
        return Ok(bytes);
    }
    let img = image::load_from_memory(&bytes).map_err(|e| ReviewError::Input(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    img.write_to(&mut Cursor::new(&mut out), image::ImageFormat::Png)
        .map_err(|e| ReviewError::Input(format!("{}: {e}", path.display())))?;
    Ok(out)
}

async fn stats(State(app): State<AppState>) -> Json<StatsBody> {
    Json(StatsBody {
        queue: app.store.stats(),
        agreement: app.store.agreement_report().ok(),
    })
}

async fn export(State(app): State<AppState>) -> ApiResult<Json<Value>> {
    let manifest = app.store.export_accepted(app.export_path.as_deref())?;
    let samples: Vec<Value> = manifest
        .to_jsonl()
        .lines()
        .skip(1)
        .map(|l| serde_json::from_str(l).expect("manifest lines are JSON"))
        .collect();
    Ok(Json(json!({
        "schema_version": manifest.schema_version,
        "metadata": manifest.metadata,
        "count": samples.len(),
        "samples": samples,
    })))
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).unwrap_or("") {
        "html" | "htm" => "text/html; charset=utf-8",
        "js" | "mjs" => "text/javascript; charset=utf-8",
        "css" => "text/css; charset=utf-8",
        "json" | "map" => "application/json",
        "svg" => "image/svg+xml",
        "png" => "image/png",
        "jpg" | "jpeg" => "image/jpeg",
        "ico" => "image/x-icon",
        "woff2" => "font/woff2",
        "txt" => "text/plain; charset=utf-8",
        _ => "application/octet-stream",
    }
}

/// Resolves a request path under `root`, refusing anything that would
/// escape it.
fn static_path(root: &Path, request: &str) -> Option<PathBuf> {
    let rel = Path::new(request.trim_start_matches('/'));
    let mut out = root.to_path_buf();
    for comp in rel.components() {
        match comp {
            Component::Normal(part) => out.push(part),
            Component::CurDir => {}
            _ => return None,
        }
    }
    if out.is_dir() {
        out.push("index.html");
    }
    Some(out)
}

async fn static_asset(State(app): State<AppState>, uri: axum::http::Uri) -> Response {
    let path = uri.path();
    if path.starts_with("/api/") {
        return ApiError(StatusCode::NOT_FOUND, format!("no route {path}")).into_response();
    }
    let Some(root) = &app.ui_dir else {
        return if path == "/" || path == "/index.html" {
            ([(header::CONTENT_TYPE, "text/html; charset=utf-8")], INDEX_HTML).into_response()
        } else {
            (StatusCode::NOT_FOUND, "not found").into_response()
        };
    };
    let Some(file) = static_path(root, path) else {
        return (StatusCode::BAD_REQUEST, "bad path").into_response();
    };
    match std::fs::read(&file) {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type(&file))], bytes).into_response(),
        Err(_) => (StatusCode::NOT_FOUND, "not found").into_response(),
    }
}

/// The full application: API routes and the UI fallback.
pub fn router(store: Arc<ReviewStore>, config: &ServerConfig) -> Router {
    let state = AppState {
        store,
        ui_dir: config.ui_dir.clone(),
        export_path: config.export_path.clone(),
    };
    Router::new()
        .route("/api/candidates/next", get(next))
        .route("/api/verdicts", post(verdict))
        .route("/api/images/{candidate_id}", get(image))
        .route("/api/stats", get(stats))
        .route("/api/export", get(export))
        .fallback(static_asset)
        .with_state(state)
}

/// Serves until the process is stopped.
pub async fn serve(store: Arc<ReviewStore>, config: ServerConfig) -> Result<(), ReviewError> {
    let addr = SocketAddr::from(([0, 0, 0, 0], config.port));
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| ReviewError::Input(format!("cannot bind {addr}: {e}")))?;
    info!("review service listening on http://{}", listener.local_addr().map_err(|e| ReviewError::Input(e.to_string()))?);
    axum::serve(listener, router(store, &config))
        .await
        .map_err(|e| ReviewError::Input(format!("server error: {e}")))
}

pub fn serve_blocking(store: Arc<ReviewStore>, config: ServerConfig) -> Result<(), ReviewError> {
    tokio::runtime::Runtime::new()
        .map_err(|e| ReviewError::Input(format!("cannot start runtime: {e}")))?
        .block_on(serve(store, config))
}
