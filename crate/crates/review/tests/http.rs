//! The JSON API, driven in-process through the router.

use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use convseg_core::synthetic::{write_dataset, SceneSpec};
use convseg_core::load_manifest;
use convseg_review::{
    candidates_from_manifest, prepare_candidates, router, ManualClock, ReviewStore, ServerConfig, DEFAULT_LEASE_MS,
};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn app(dir: &Path, ui_dir: Option<&Path>) -> Router {
    let spec = SceneSpec {
        width: 24,
        height: 24,
        objects: 1,
        min_side: 6,
        max_side: 10,
    };
    let manifest = write_dataset(&dir.join("img"), 3, &spec, 1).unwrap().0;
    let cands = prepare_candidates(candidates_from_manifest(&manifest), &dir.join("review")).unwrap();
    let store = ReviewStore::open(cands, &dir.join("review/events.jsonl"), Arc::new(ManualClock::new(0)), DEFAULT_LEASE_MS).unwrap();
    let config = ServerConfig {
        ui_dir: ui_dir.map(Path::to_path_buf),
        export_path: Some(dir.join("export/accepted.jsonl")),
        ..ServerConfig::default()
    };
    router(Arc::new(store), &config)
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Option<String>, Vec<u8>) {
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let ct = res.headers().get(header::CONTENT_TYPE).map(|v| v.to_str().unwrap().to_string());
    let body = res.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, ct, body)
}

async fn get_json(app: &Router, uri: &str) -> (StatusCode, Value) {
    let (status, _, body) = send(app, Request::get(uri).body(Body::empty()).unwrap()).await;
    (status, serde_json::from_slice(&body).unwrap())
}

async fn post_verdict(app: &Router, body: Value) -> (StatusCode, Value) {
    let req = Request::post("/api/verdicts")
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let (status, _, body) = send(app, req).await;
    (status, serde_json::from_slice(&body).unwrap())
}

#[tokio::test]
async fn review_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), None);

    let (status, next) = get_json(&app, "/api/candidates/next?session=ann").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(next["decided"], 0);
    let total = next["total"].as_u64().unwrap();
    let cand = &next["candidate"];
    let id = cand["candidate_id"].as_str().unwrap().to_string();
    assert_eq!(cand["ai_suggestion"], "accept");

    for key in ["overlay_url", "plain_url"] {
        let uri = cand[key].as_str().unwrap();
        let (status, ct, bytes) = send(&app, Request::get(uri).body(Body::empty()).unwrap()).await;
        assert_eq!(status, StatusCode::OK, "{uri}");
        assert_eq!(ct.as_deref(), Some("image/png"));
        assert!(bytes.starts_with(b"\x89PNG"));
    }

    let verdict = json!({"candidate_id": id, "decision": "accept", "annotator_id": "ann"});
    let (status, record) = post_verdict(&app, verdict.clone()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(record["decision"], "accept");
    // a double submit returns the same record
    let (status, again) = post_verdict(&app, verdict).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(again, record);
    let (status, _) = post_verdict(&app, json!({"candidate_id": id, "decision": "reject", "annotator_id": "ann"})).await;
    assert_eq!(status, StatusCode::CONFLICT);

    let (_, next) = get_json(&app, "/api/candidates/next?session=ann").await;
    let second = next["candidate"]["candidate_id"].as_str().unwrap().to_string();
    assert_ne!(second, id);
    let (status, _) =
        post_verdict(&app, json!({"candidate_id": second, "decision": "reject", "annotator_id": "ann", "reason": "wrong object"})).await;
    assert_eq!(status, StatusCode::OK);

    let (_, stats) = get_json(&app, "/api/stats").await;
    assert_eq!(stats["decided"], 2);
    assert_eq!(stats["accepted"], 1);
    assert_eq!(stats["total"], total);
    assert_eq!(stats["agreement"]["agreement_rate"], 0.5);

    let (status, export) = get_json(&app, "/api/export").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(export["count"], 1);
    let written = load_manifest(dir.path().join("export/accepted.jsonl")).unwrap();
    assert_eq!(written.len(), 1);
    assert_eq!(export["samples"][0]["sample_id"].as_str().unwrap(), written.samples[0].sample_id);
}

#[tokio::test]
async fn errors_map_to_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), None);
    let (status, body) = get_json(&app, "/api/candidates/next").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(body["error"].is_string());

    let (status, _) = post_verdict(&app, json!({"candidate_id": "nope", "decision": "accept", "annotator_id": "a"})).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = post_verdict(&app, json!({"candidate_id": "x", "decision": "maybe", "annotator_id": "a"})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let (_, next) = get_json(&app, "/api/candidates/next?session=ann").await;
    let id = next["candidate"]["candidate_id"].as_str().unwrap();
    let (status, _) = post_verdict(&app, json!({"candidate_id": id, "decision": "accept", "annotator_id": "bob"})).await;
    assert_eq!(status, StatusCode::CONFLICT);

    let (status, _) = get_json(&app, &format!("/api/images/{id}?variant=sepia")).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = get_json(&app, "/api/images/nope").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = get_json(&app, "/api/nothing").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn empty_queue_yields_null_candidate() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), None);
    loop {
        let (_, next) = get_json(&app, "/api/candidates/next?session=ann").await;
        if next["candidate"].is_null() {
            assert_eq!(next["decided"], next["total"]);
            break;
        }
        let id = next["candidate"]["candidate_id"].clone();
        post_verdict(&app, json!({"candidate_id": id, "decision": "reject", "annotator_id": "ann"})).await;
    }
    let (_, export) = get_json(&app, "/api/export").await;
    assert_eq!(export["count"], 0);
}

#[tokio::test]
async fn ui_is_served_at_root() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), None);
    let (status, ct, body) = send(&app, Request::get("/").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    assert!(ct.unwrap().starts_with("text/html"));
    assert!(String::from_utf8(body).unwrap().contains("/api/candidates/next"));

    let ui = dir.path().join("ui");
    std::fs::create_dir_all(ui.join("assets")).unwrap();
    std::fs::write(ui.join("index.html"), "<p>built ui</p>").unwrap();
    std::fs::write(ui.join("assets/app.js"), "console.log(1)").unwrap();
    std::fs::write(dir.path().join("secret.txt"), "no").unwrap();
    let app = self::app(dir.path(), Some(&ui));
    let (_, _, body) = send(&app, Request::get("/").body(Body::empty()).unwrap()).await;
    assert_eq!(body, b"<p>built ui</p>");
    let (status, ct, _) = send(&app, Request::get("/assets/app.js").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    assert!(ct.unwrap().starts_with("text/javascript"));
    let (status, _, _) = send(&app, Request::get("/../secret.txt").body(Body::empty()).unwrap()).await;
    assert_ne!(status, StatusCode::OK);
    let (status, _, _) = send(&app, Request::get("/%2e%2e/secret.txt").body(Body::empty()).unwrap()).await;
    assert_ne!(status, StatusCode::OK);
}
