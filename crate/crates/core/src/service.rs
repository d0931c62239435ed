//! HTTP service.
//!
//! | route                        | method | success                      |
//! |------------------------------|--------|------------------------------|
//! | `/healthz`                   | GET    | 200 status, index size, digest |
//! | `/v1/schema`                 | GET    | 200 case field schema        |
//! | `/v1/screen`                 | POST   | 200 scores plus evidence     |
//! | `/v1/cases/{id}/similar?k=`  | GET    | 200 neighbours               |
//! | `/v1/corpus/import`          | POST   | 202, index rebuilt in background |
//! | `/v1/admin/reload`           | POST   | 202, artifacts reloaded in background |
//!
//! Errors are `{"error": <code>, "message": ...}` with a code from
//! [`ErrorCode`]. Until artifacts are installed every `/v1` route except the
//! schema answers 503 `NotReady`.

use std::future::Future;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use arc_swap::ArcSwapOption;
use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, Request, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};
use tower_http::cors::{AllowOrigin, CorsLayer};

use crate::casemodel::io::parse_jsonl_lenient;
use crate::config::ServiceConfig;
use crate::diagnose::RemoteConfig;
use crate::screen::{case_schema, parse_screen_request, screen, similar, Artifacts, ErrorCode, ScreenError};

const IMPORT_BODY_LIMIT: usize = 64 * 1024 * 1024;

/// Shared state: the current artifact snapshot, swapped atomically.
pub struct AppState {
    snapshot: ArcSwapOption<Artifacts>,
    generation: AtomicU64,
    rebuild: Mutex<()>,
    pub config: ServiceConfig,
    pub remote: Option<RemoteConfig>,
}

impl AppState {
    pub fn new(config: ServiceConfig, remote: Option<RemoteConfig>) -> Arc<Self> {
        Arc::new(Self {
            snapshot: ArcSwapOption::empty(),
            generation: AtomicU64::new(0),
            rebuild: Mutex::new(()),
            config,
            remote,
        })
    }

    pub fn install(&self, art: Artifacts) {
        self.snapshot.store(Some(Arc::new(art)));
        self.generation.fetch_add(1, Ordering::SeqCst);
    }

    pub fn current(&self) -> Option<Arc<Artifacts>> {
        self.snapshot.load_full()
    }

    /// Bumped on every install; lets clients wait for a background rebuild.
    pub fn generation(&self) -> u64 {
        self.generation.load(Ordering::SeqCst)
    }

    /// Load artifacts from the configured paths.
    pub fn load_configured(&self) -> Result<Artifacts, ScreenError> {
        let c = &self.config;
        match (&c.checkpoint, &c.index, &c.corpus) {
            (Some(ck), Some(ix), Some(co)) => Artifacts::load(ck, ix, co),
            _ => Err(ScreenError::BadRequest("checkpoint, index and corpus paths must all be configured".into())),
        }
    }
}

pub struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn new(status: StatusCode, code: ErrorCode, message: impl Into<String>) -> Self {
        Self { status, body: json!({ "error": code.as_str(), "message": message.into() }) }
    }

    fn not_ready() -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, ErrorCode::NotReady, "artifacts are still loading")
    }
}

impl From<ScreenError> for ApiError {
    fn from(e: ScreenError) -> Self {
        let status = match e.code() {
            ErrorCode::ValidationFailed | ErrorCode::BadRequest => StatusCode::BAD_REQUEST,
            ErrorCode::UnknownCase | ErrorCode::NotFound => StatusCode::NOT_FOUND,
            ErrorCode::BackendTimeout => StatusCode::GATEWAY_TIMEOUT,
            ErrorCode::BackendHttpError | ErrorCode::BackendUnreachable => StatusCode::BAD_GATEWAY,
            ErrorCode::BackendNotConfigured => StatusCode::NOT_IMPLEMENTED,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self { status, body: e.to_json() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult = Result<Response, ApiError>;

fn ready(state: &AppState) -> Result<Arc<Artifacts>, ApiError> {
    state.current().ok_or_else(ApiError::not_ready)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, ErrorCode::Internal, e.to_string()))
}

async fn healthz(State(state): State<Arc<AppState>>) -> Json<Value> {
    Json(match state.current() {
        None => json!({ "status": "starting", "index_size": 0, "checkpoint_digest": null, "generation": state.generation() }),
        Some(a) => json!({
            "status": "ready",
            "index_size": a.base.len(),
            "checkpoint_digest": a.checkpoint_digest,
            "generation": state.generation(),
        }),
    })
}

async fn schema() -> Json<Value> {
    Json(case_schema())
}

fn parse_json(body: &[u8]) -> Result<Value, ApiError> {
    serde_json::from_slice(body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, ErrorCode::PayloadUnparseable, e.to_string()))
}

async fn screen_case(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult {
    let art = ready(&state)?;
    let req = parse_screen_request(parse_json(&body)?)?;
    let st = state.clone();
    let out = blocking(move || screen(&art, &req, st.config.backend, st.remote.as_ref())).await??;
    Ok(Json(out).into_response())
}

#[derive(Deserialize)]
struct SimilarQuery {
    k: Option<String>,
}

async fn similar_cases(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<SimilarQuery>,
) -> ApiResult {
    let art = ready(&state)?;
    let k = match q.k {
        None => art.checkpoint.model.config.k,
        Some(s) => s
            .parse::<usize>()
            .map_err(|_| ApiError::new(StatusCode::BAD_REQUEST, ErrorCode::BadRequest, "k must be a positive integer"))?,
    };
    let out = blocking(move || similar(&art, &id, k)).await??;
    Ok(Json(out).into_response())
}

async fn import_corpus(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult {
    let art = ready(&state)?;
    let text = std::str::from_utf8(&body)
        .map_err(|_| ApiError::new(StatusCode::BAD_REQUEST, ErrorCode::PayloadUnparseable, "body is not UTF-8"))?;
    let parsed = parse_jsonl_lenient(text, &art.ids());
    let all_malformed = parsed.rejected.iter().all(|e| e.reason() == "MalformedJson");
    if parsed.records.is_empty() && all_malformed {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, ErrorCode::PayloadUnparseable, "no parseable JSON lines"));
    }
    let rejected: Vec<Value> = parsed
        .rejected
        .iter()
        .map(|e| {
            let line = match e {
                crate::casemodel::io::CorpusError::Invalid { line, .. }
                | crate::casemodel::io::CorpusError::Json { line, .. }
                | crate::casemodel::io::CorpusError::Labels { line, .. }
                | crate::casemodel::io::CorpusError::DuplicateId { line, .. } => Some(*line),
                _ => None,
            };
            json!({ "line": line, "reason": e.reason(), "message": e.to_string() })
        })
        .collect();
    let accepted = parsed.records.len();
    let target = state.generation() + 1;
    if accepted > 0 {
        let st = state.clone();
        let records = parsed.records;
        tokio::task::spawn_blocking(move || {
            let _guard = st.rebuild.lock().unwrap_or_else(|p| p.into_inner());
            // re-read: another import may have landed since validation
            let Some(cur) = st.current() else { return };
            match cur.with_records(records) {
                Ok((next, skipped)) => {
                    if !skipped.is_empty() {
                        log::warn!("import skipped {} id(s) added concurrently", skipped.len());
                    }
                    st.install(next);
                }
                Err(e) => log::error!("import rebuild failed: {e}"),
            }
        });
    }
    let body = json!({
        "accepted": accepted,
        "rejected": rejected,
        "generation": if accepted > 0 { target } else { state.generation() },
    });
    Ok((StatusCode::ACCEPTED, Json(body)).into_response())
}

async fn admin_reload(State(state): State<Arc<AppState>>) -> ApiResult {
    let c = &state.config;
    if c.checkpoint.is_none() || c.index.is_none() || c.corpus.is_none() {
        return Err(ScreenError::BadRequest("no artifact paths configured".into()).into());
    }
    let target = state.generation() + 1;
    let st = state.clone();
    tokio::task::spawn_blocking(move || {
        let _guard = st.rebuild.lock().unwrap_or_else(|p| p.into_inner());
        match st.load_configured() {
            Ok(a) => st.install(a),
            Err(e) => log::error!("reload failed: {e}"),
        }
    });
    Ok((StatusCode::ACCEPTED, Json(json!({ "generation": target }))).into_response())
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, ErrorCode::NotFound, "no such route")
}

async fn require_token(State(state): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    if let Some(token) = &state.config.bearer_token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == token);
        if !ok {
            return ApiError::new(StatusCode::UNAUTHORIZED, ErrorCode::Unauthorized, "missing or wrong bearer token")
                .into_response();
        }
    }
    next.run(req).await
}

fn cors(origins: &[String]) -> CorsLayer {
    let list: Vec<HeaderValue> = origins.iter().filter_map(|o| HeaderValue::from_str(o).ok()).collect();
    CorsLayer::new()
        .allow_origin(AllowOrigin::list(list))
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE, header::AUTHORIZATION])
}

pub fn router(state: Arc<AppState>) -> Router {
    let protected = Router::new()
        .route("/v1/screen", post(screen_case))
        .route("/v1/cases/{id}/similar", get(similar_cases))
        .route("/v1/corpus/import", post(import_corpus).layer(DefaultBodyLimit::max(IMPORT_BODY_LIMIT)))
        .route("/v1/admin/reload", post(admin_reload))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new()
        .route("/healthz", get(healthz))
        .route("/v1/schema", get(schema))
        .merge(protected)
        .fallback(not_found)
        .layer(cors(&state.config.cors_origins))
        .with_state(state)
}

/// Serve until `shutdown` resolves, loading configured artifacts in the
/// background so `/healthz` answers immediately.
pub async fn serve(
    state: Arc<AppState>,
    listener: tokio::net::TcpListener,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    if state.current().is_none() && state.config.checkpoint.is_some() {
        let st = state.clone();
        tokio::task::spawn_blocking(move || match st.load_configured() {
            Ok(a) => {
                log::info!("artifacts loaded: {} indexed cases, checkpoint {}", a.base.len(), a.checkpoint_digest);
                st.install(a);
            }
            Err(e) => log::error!("loading artifacts failed: {e}"),
        });
    }
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}

/// Resolves on Ctrl-C or SIGTERM.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}
