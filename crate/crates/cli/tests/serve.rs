use std::sync::{Arc, Mutex};

use approxcache::report::RunReport;
use approxcache::workload::synth_stream;
use approxcache::{ExperimentConfig, RequestOutcome, RequestPath};
use approxcache_cli::serve::{router, serve, ServeState, Shared, ShutdownOutputs};
use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use tower::ServiceExt;

fn config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.workload.preload = 200;
    c.workload.synth.total_prompts = 400;
    c
}

fn state(c: &ExperimentConfig) -> Shared {
    Arc::new(Mutex::new(ServeState::new(c).unwrap()))
}

async fn call(state: &Shared, req: Request<Body>) -> (StatusCode, serde_json::Value) {
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap())
}

fn post(body: impl Into<Body>) -> Request<Body> {
    Request::post("/generate")
        .header("content-type", "application/json")
        .body(body.into())
        .unwrap()
}

fn metrics() -> Request<Body> {
    Request::get("/metrics").body(Body::empty()).unwrap()
}

#[tokio::test]
async fn known_prompt_hits_the_preloaded_cache() {
    let c = config();
    let s = state(&c);
    let cached = synth_stream(c.workload.synth.clone()).unwrap().next().unwrap();
    let body = serde_json::json!({ "id": "again", "embedding": cached.embedding.unwrap() });
    let (status, v) = call(&s, post(body.to_string())).await;
    assert_eq!(status, StatusCode::OK);
    let o: RequestOutcome = serde_json::from_value(v).unwrap();
    assert_eq!(o.path, RequestPath::CacheHit);
    assert!(c.steps.contains(o.k_used));
    assert_eq!(o.prompt_id, "again");
}

#[tokio::test]
async fn malformed_requests_get_an_error_object() {
    let s = state(&config());
    for body in [
        "{not json".to_string(),
        r#"{"id": "x"}"#.to_string(),
        r#"{"embedding": [1.0, 0.0]}"#.to_string(),
        r#"{"embedding": [0.0, 0.0]}"#.to_string(),
        r#"{"text": ""}"#.to_string(),
        r#"{"text": "hi", "extra": 1}"#.to_string(),
    ] {
        let (status, v) = call(&s, post(body.clone())).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
        assert!(v["error"].is_string(), "{body}");
    }
    let (status, _) = call(&s, post(r#"{"text": "a lighthouse at dusk"}"#)).await;
    assert_eq!(status, StatusCode::OK);
    let (_, v) = call(&s, metrics()).await;
    assert_eq!(v["total_requests"], 1);
}

#[tokio::test]
async fn metrics_count_requests() {
    let s = state(&config());
    for i in 0..10 {
        let (status, v) = call(&s, post(format!(r#"{{"text": "prompt {i}"}}"#))).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(v["prompt_id"], format!("req{i:08}"));
    }
    let (status, v) = call(&s, metrics()).await;
    assert_eq!(status, StatusCode::OK);
    let r: RunReport = serde_json::from_value(v).unwrap();
    assert_eq!(r.total_requests, 10);
    assert_eq!(r.config["workload"]["preload"], 200);
}

#[tokio::test]
async fn shutdown_writes_report_and_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let outputs = ShutdownOutputs {
        report: Some(dir.path().join("report.json")),
        snapshot: Some(dir.path().join("index.jsonl")),
    };
    let s = state(&config());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let server = tokio::spawn(serve(listener, s.clone(), outputs, async {
        let _ = rx.await;
    }));
    call(&s, post(r#"{"text": "before shutdown"}"#)).await;
    tx.send(()).unwrap();
    let report = server.await.unwrap().unwrap();
    assert_eq!(report.total_requests, 1);
    let written: RunReport =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(written, report);
    let snapshot = std::fs::read_to_string(dir.path().join("index.jsonl")).unwrap();
    assert_eq!(snapshot.lines().count(), report.index_size);
}
