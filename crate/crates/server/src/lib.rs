//! HTTP API over a [`JudgingStore`]: sessions, blinded items, ratings and an admin export.
//!
//! | method | path                      | body / auth                  |
//! |--------|---------------------------|------------------------------|
//! | POST   | `/v1/sessions`            | `{"judge_id", "seed"}`       |
//! | GET    | `/v1/sessions/{id}/next`  |                              |
//! | POST   | `/v1/ratings`             | a judging record             |
//! | GET    | `/v1/export`              | `Authorization: Bearer ...`  |
//! | GET    | `/v1/health`              |                              |

use std::future::Future;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;
use tower_http::services::ServeDir;

use valuelens::evalharness::judging::JudgingStore;
use valuelens::evalharness::{BlindedPool, EvalError, JudgingRecord};

/// Environment variable read for the export token when none is configured.
pub const DEFAULT_ADMIN_TOKEN_ENV: &str = "VALUELENS_ADMIN_TOKEN";

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error("store: {0}")]
    Store(#[from] EvalError),
    #[error("server: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<JudgingStore>,
    /// Export is disabled when no token is configured.
    pub admin_token: Option<String>,
}

struct ApiError(EvalError);

impl From<EvalError> for ApiError {
    fn from(e: EvalError) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, body) = match &self.0 {
            EvalError::NotFound(what) => (StatusCode::NOT_FOUND, json!({ "error": format!("not found: {what}") })),
            EvalError::Validation { field, message } => (
                StatusCode::UNPROCESSABLE_ENTITY,
                json!({ "error": "validation failed", "field": field, "message": message }),
            ),
            EvalError::InvalidArgument(m) => (StatusCode::BAD_REQUEST, json!({ "error": m })),
            other => {
                log::error!("request failed: {other}");
                (StatusCode::INTERNAL_SERVER_ERROR, json!({ "error": "internal error" }))
            }
        };
        (status, Json(body)).into_response()
    }
}

#[derive(Debug, Deserialize)]
struct SessionRequest {
    judge_id: String,
    #[serde(default)]
    seed: u64,
}

#[derive(Debug, Serialize)]
struct RatingAccepted {
    record_id: u64,
}

fn now_ms() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as i64)
        .unwrap_or(0)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, EvalError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(EvalError::Io(e.to_string())))?
        .map_err(ApiError)
}

async fn create_session(State(state): State<AppState>, Json(req): Json<SessionRequest>) -> Result<impl IntoResponse, ApiError> {
    let store = state.store.clone();
    let session = blocking(move || store.create_session(&req.judge_id, req.seed)).await?;
    Ok((StatusCode::CREATED, Json(session)))
}

async fn next_item(State(state): State<AppState>, Path(session_id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(state.store.next_item(&session_id)?))
}

async fn record_rating(State(state): State<AppState>, Json(record): Json<JudgingRecord>) -> Result<impl IntoResponse, ApiError> {
    let store = state.store.clone();
    let record_id = blocking(move || store.record_rating(record, now_ms())).await?;
    Ok((StatusCode::CREATED, Json(RatingAccepted { record_id })))
}

fn authorized(headers: &HeaderMap, token: Option<&str>) -> bool {
    let Some(token) = token else { return false };
    headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .is_some_and(|given| given.as_bytes() == token.as_bytes())
}

async fn export(State(state): State<AppState>, headers: HeaderMap) -> Result<Response, ApiError> {
    if !authorized(&headers, state.admin_token.as_deref()) {
        return Ok((
            StatusCode::UNAUTHORIZED,
            [(header::WWW_AUTHENTICATE, "Bearer")],
            Json(json!({ "error": "admin token required" })),
        )
            .into_response());
    }
    let store = state.store.clone();
    let export = blocking(move || store.export()).await?;
    Ok(Json(export).into_response())
}

async fn health() -> impl IntoResponse {
    Json(json!({ "status": "ok" }))
}

/// API routes, plus static UI assets under `/` when `ui_dir` is given.
pub fn router(state: AppState, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/v1/health", get(health))
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}/next", get(next_item))
        .route("/v1/ratings", post(record_rating))
        .route("/v1/export", get(export))
        .with_state(state);
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Serves until `shutdown` resolves, then flushes the rating log.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: AppState,
    ui_dir: Option<PathBuf>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), ServeError> {
    let store = state.store.clone();
    axum::serve(listener, router(state, ui_dir))
        .with_graceful_shutdown(shutdown)
        .await?;
    store.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub items: PathBuf,
    pub store: PathBuf,
    pub bind: String,
    pub ui_dir: Option<PathBuf>,
    pub admin_token_env: String,
}

async fn termination() {
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
    log::info!("shutting down");
}

/// Opens the store and serves until SIGINT/SIGTERM. `on_bound` receives the bound address.
pub fn run_blocking(config: &ServerConfig, on_bound: impl FnOnce(SocketAddr)) -> Result<(), ServeError> {
    let pool = BlindedPool::read_jsonl(&config.items)?;
    let store = Arc::new(JudgingStore::open(pool, &config.store)?);
    let admin_token = std::env::var(&config.admin_token_env).ok().filter(|t| !t.is_empty());
    if admin_token.is_none() {
        log::warn!("{} is not set; export is disabled", config.admin_token_env);
    }
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(&config.bind)
            .await
            .map_err(|source| ServeError::Bind {
                addr: config.bind.clone(),
                source,
            })?;
        on_bound(listener.local_addr()?);
        serve(listener, AppState { store, admin_token }, config.ui_dir.clone(), termination()).await
    })
}
