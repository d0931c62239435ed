mod common;

use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use brains::config::{BackendChoice, ServiceConfig};
use brains::diagnose::RemoteConfig;
use brains::service::{router, AppState};

async fn call(state: &Arc<AppState>, req: Request<Body>) -> (StatusCode, Value) {
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

fn post(uri: &str, body: impl Into<Body>) -> Request<Body> {
    Request::post(uri).header(header::CONTENT_TYPE, "application/json").body(body.into()).unwrap()
}

fn ready_state(cfg: ServiceConfig, remote: Option<RemoteConfig>) -> Arc<AppState> {
    let st = AppState::new(cfg, remote);
    st.install(common::artifacts(80, 3));
    st
}

fn query() -> Value {
    json!({"id": "walk-in-1", "mmse": 21, "cdr": 1, "age": 77, "nwbv": 0.69, "gender": "F"})
}

#[tokio::test]
async fn not_ready_until_installed() {
    let st = AppState::new(ServiceConfig::default(), None);
    let (s, v) = call(&st, get("/healthz")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "starting");
    let (s, v) = call(&st, post("/v1/screen", query().to_string())).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(v["error"], "NotReady");
    let (s, _) = call(&st, get("/v1/schema")).await;
    assert_eq!(s, StatusCode::OK);

    st.install(common::artifacts(40, 1));
    let (_, v) = call(&st, get("/healthz")).await;
    assert_eq!(v["status"], "ready");
    assert_eq!(v["index_size"], 40);
    assert_eq!(v["checkpoint_digest"].as_str().unwrap().len(), 64);
}

#[tokio::test]
async fn screen_returns_scores_and_evidence() {
    let st = ready_state(ServiceConfig::default(), None);
    let mut q = query();
    q["k"] = json!(4);
    let (s, v) = call(&st, post("/v1/screen", q.to_string())).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["id"], "walk-in-1");
    let scores = v["scores"].as_array().unwrap();
    assert_eq!(scores.len(), 5);
    assert!(scores.iter().all(|x| (0.0..=1.0).contains(&x.as_f64().unwrap())));
    assert_eq!(v["evidence"].as_array().unwrap().len(), 4);
    let cases = v["cases"].as_array().unwrap();
    assert_eq!(cases.len(), 4);
    for c in cases {
        for key in ["mmse", "cdr", "age", "nwbv", "labels", "narrative_digest"] {
            assert!(c.get(key).is_some(), "{key} missing");
        }
    }
    let attention: f64 = v["evidence"].as_array().unwrap().iter().map(|e| e["attention"].as_f64().unwrap()).sum();
    assert!((attention - 1.0).abs() < 1e-9);
    assert_eq!(v["checkpoint_digest"].as_str().unwrap().len(), 64);
    assert_eq!(v["config_digest"].as_str().unwrap().len(), 64);
}

#[tokio::test]
async fn screen_validation_errors() {
    let st = ready_state(ServiceConfig::default(), None);
    let (s, v) = call(&st, post("/v1/screen", json!({"id": "x", "mmse": 31, "cdr": 0.7, "age": 70}).to_string())).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"], "ValidationFailed");
    let fields: Vec<(&str, &str)> = v["fields"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| (f["field"].as_str().unwrap(), f["code"].as_str().unwrap()))
        .collect();
    assert_eq!(fields, [("cdr", "UnknownCategory"), ("mmse", "RangeViolation")]);

    let (s, v) = call(&st, post("/v1/screen", "{oops")).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"], "PayloadUnparseable");

    let mut q = query();
    q["k"] = json!(0);
    let (s, v) = call(&st, post("/v1/screen", q.to_string())).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"], "BadRequest");
}

#[tokio::test]
async fn similar_endpoint() {
    let st = ready_state(ServiceConfig::default(), None);
    let (s, v) = call(&st, get("/v1/cases/syn-00001/similar?k=3")).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let n = v["neighbours"].as_array().unwrap();
    assert_eq!(n.len(), 3);
    assert!(n.iter().all(|x| x["id"] != "syn-00001"));
    let cos: Vec<f64> = n.iter().map(|x| x["cosine"].as_f64().unwrap()).collect();
    assert!(cos.windows(2).all(|w| w[0] >= w[1]));

    let (s, v) = call(&st, get("/v1/cases/nobody/similar?k=3")).await;
    assert_eq!((s, v["error"].as_str()), (StatusCode::NOT_FOUND, Some("UnknownCase")));
    let (s, _) = call(&st, get("/v1/cases/syn-00001/similar?k=0")).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(&st, get("/v1/cases/syn-00001/similar?k=two")).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn import_reports_rejections_and_rebuilds() {
    let st = ready_state(ServiceConfig::default(), None);
    let body = [
        json!({"id": "new-1", "mmse": 25, "cdr": 0.5, "age": 66, "labels": [1, 3]}).to_string(),
        "".to_string(),
        json!({"id": "new-2", "mmse": 35, "cdr": 0.5, "age": 66}).to_string(),
        "{broken".to_string(),
        json!({"id": "syn-00001", "mmse": 25, "cdr": 0.5, "age": 66}).to_string(),
        json!({"id": "new-3", "mmse": 18, "cdr": 1, "age": 81, "labels": [1]}).to_string(),
    ]
    .join("\n");
    let before = st.generation();
    let (s, v) = call(&st, post("/v1/corpus/import", body)).await;
    assert_eq!(s, StatusCode::ACCEPTED, "{v}");
    assert_eq!(v["accepted"], 2);
    let rejected: Vec<(u64, &str)> = v["rejected"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| (r["line"].as_u64().unwrap(), r["reason"].as_str().unwrap()))
        .collect();
    assert_eq!(rejected, [(3, "RangeViolation"), (4, "MalformedJson"), (5, "DuplicateId")]);

    for _ in 0..200 {
        if st.generation() > before {
            break;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    let (_, h) = call(&st, get("/healthz")).await;
    assert_eq!(h["index_size"], 82);
    let (s, _) = call(&st, get("/v1/cases/new-3/similar?k=2")).await;
    assert_eq!(s, StatusCode::OK);
}

#[tokio::test]
async fn import_wholly_unparseable() {
    let st = ready_state(ServiceConfig::default(), None);
    let (s, v) = call(&st, post("/v1/corpus/import", "not json\nstill not")).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"], "PayloadUnparseable");
    let (s, _) = call(&st, post("/v1/corpus/import", "")).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn bearer_token_guards_v1() {
    let cfg = ServiceConfig { bearer_token: Some("s3cret".into()), ..Default::default() };
    let st = ready_state(cfg, None);
    let (s, v) = call(&st, post("/v1/screen", query().to_string())).await;
    assert_eq!((s, v["error"].as_str()), (StatusCode::UNAUTHORIZED, Some("Unauthorized")));
    let req = Request::post("/v1/screen")
        .header(header::AUTHORIZATION, "Bearer s3cret")
        .body(Body::from(query().to_string()))
        .unwrap();
    let (s, _) = call(&st, req).await;
    assert_eq!(s, StatusCode::OK);
    let (s, _) = call(&st, get("/healthz")).await;
    assert_eq!(s, StatusCode::OK);
    let (s, _) = call(&st, get("/v1/schema")).await;
    assert_eq!(s, StatusCode::OK);
}

#[tokio::test]
async fn cors_allowlist() {
    let st = ready_state(ServiceConfig::default(), None);
    let preflight = |origin: &str| {
        Request::builder()
            .method("OPTIONS")
            .uri("/v1/screen")
            .header(header::ORIGIN, origin)
            .header(header::ACCESS_CONTROL_REQUEST_METHOD, "POST")
            .header(header::ACCESS_CONTROL_REQUEST_HEADERS, "content-type")
            .body(Body::empty())
            .unwrap()
    };
    let resp = router(st.clone()).oneshot(preflight("http://localhost:5173")).await.unwrap();
    assert_eq!(resp.headers()[header::ACCESS_CONTROL_ALLOW_ORIGIN], "http://localhost:5173");
    let resp = router(st.clone()).oneshot(preflight("http://evil.example")).await.unwrap();
    assert!(resp.headers().get(header::ACCESS_CONTROL_ALLOW_ORIGIN).is_none());
}

#[tokio::test]
async fn remote_backend_errors_map_to_gateway_codes() {
    let st = ready_state(ServiceConfig::default(), None);
    let mut q = query();
    q["backend"] = json!("remote");
    let (s, v) = call(&st, post("/v1/screen", q.to_string())).await;
    assert_eq!((s, v["error"].as_str()), (StatusCode::NOT_IMPLEMENTED, Some("BackendNotConfigured")));

    let mock = common::scripted(vec![common::Reply::status(400)]);
    let remote = RemoteConfig { base_url: mock.base_url.clone(), timeout_ms: 2000, ..Default::default() };
    let cfg = ServiceConfig { backend: BackendChoice::Remote, ..Default::default() };
    let st = ready_state(cfg, Some(remote));
    let (s, v) = call(&st, post("/v1/screen", query().to_string())).await;
    assert_eq!(s, StatusCode::BAD_GATEWAY);
    assert_eq!(v["error"], "BackendHttpError");
    assert_eq!(v["status"], 400);
    assert_eq!(v["body_digest"].as_str().unwrap().len(), 16);

    let ok = common::scripted(vec![common::Reply::ok("Late-Onset Alzheimer's Disease; Sporadic")]);
    let remote = RemoteConfig { base_url: ok.base_url.clone(), timeout_ms: 2000, ..Default::default() };
    let st = ready_state(ServiceConfig { backend: BackendChoice::Remote, ..Default::default() }, Some(remote));
    let (s, v) = call(&st, post("/v1/screen", query().to_string())).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["decided"], json!([1, 3]));
    assert_eq!(v["backend"], "remote-concat");
}

#[tokio::test]
async fn unknown_route_uses_error_shape() {
    let st = ready_state(ServiceConfig::default(), None);
    let (s, v) = call(&st, get("/v2/nothing")).await;
    assert_eq!((s, v["error"].as_str()), (StatusCode::NOT_FOUND, Some("NotFound")));
}

#[tokio::test]
async fn serves_on_a_real_socket_and_shuts_down() {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let st = ready_state(ServiceConfig::default(), None);
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let server = tokio::spawn(brains::service::serve(st, listener, async {
        let _ = rx.await;
    }));
    let body = tokio::task::spawn_blocking(move || {
        ureq::get(&format!("http://{addr}/healthz")).call().unwrap().body_mut().read_to_string().unwrap()
    })
    .await
    .unwrap();
    let v: Value = serde_json::from_str(&body).unwrap();
    assert_eq!(v["status"], "ready");
    tx.send(()).unwrap();
    tokio::time::timeout(Duration::from_secs(5), server).await.unwrap().unwrap().unwrap();
}
