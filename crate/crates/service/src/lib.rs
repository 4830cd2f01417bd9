//! Session-oriented HTTP interface to the click-feedback protocol.
//!
//! A session holds one text query, its initial ranking and the candidates
//! shown to the user. It accepts exactly one round of feedback.

mod session;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::rejection::{JsonRejection, PathRejection};
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use clickfeed_core::{Dataset, Error as CoreError, RankerParams, Retriever};
use serde::{Deserialize, Serialize};

pub use session::{ResultEntry, Session, SessionState, SessionView};

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub ranker: RankerParams,
    pub default_k: usize,
    pub session_ttl: Duration,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig { ranker: RankerParams::default(), default_k: 10, session_ttl: Duration::from_secs(30 * 60) }
    }
}

type SessionHandle = Arc<Mutex<Session>>;

/// Shared state: the immutable dataset and encoders, plus the session table.
pub struct AppState {
    dataset: Arc<Dataset>,
    retriever: Arc<Retriever>,
    config: ServiceConfig,
    sessions: Mutex<HashMap<String, SessionHandle>>,
}

impl AppState {
    pub fn new(dataset: Arc<Dataset>, retriever: Arc<Retriever>, config: ServiceConfig) -> Self {
        AppState { dataset, retriever, config, sessions: Mutex::new(HashMap::new()) }
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("session table poisoned").len()
    }

    /// Drops sessions idle for longer than the TTL.
    pub fn evict_expired(&self) -> usize {
        let ttl = self.config.session_ttl;
        let mut table = self.sessions.lock().expect("session table poisoned");
        let before = table.len();
        table.retain(|_, s| s.lock().map(|s| s.last_used.elapsed() <= ttl).unwrap_or(false));
        before - table.len()
    }

    fn lookup(&self, id: &str) -> Result<SessionHandle, ApiError> {
        let table = self.sessions.lock().expect("session table poisoned");
        let handle = table.get(id).cloned().ok_or_else(|| ApiError::not_found(format!("unknown session {id}")))?;
        drop(table);
        let expired = handle.lock().map(|s| s.last_used.elapsed() > self.config.session_ttl).unwrap_or(true);
        if expired {
            self.sessions.lock().expect("session table poisoned").remove(id);
            return Err(ApiError::not_found(format!("unknown session {id}")));
        }
        Ok(handle)
    }
}

/// JSON error body `{"error": message}` with an HTTP status.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError { status, message: message.into() }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    fn unprocessable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::new(r.status(), r.body_text())
    }
}

impl From<PathRejection> for ApiError {
    fn from(r: PathRejection) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, r.body_text())
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::UnencodableQuery(_) => ApiError::new(StatusCode::BAD_REQUEST, e.to_string()),
            CoreError::KOutOfRange { .. } | CoreError::InvalidId { .. } | CoreError::InvalidFeedback(_) => {
                ApiError::unprocessable(e.to_string())
            }
            _ => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CreateSessionRequest {
    pub query: String,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub demo_target: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CreateSessionResponse {
    pub session_id: String,
    pub results: Vec<ResultEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeedbackRequest {
    #[serde(default)]
    pub likes: Vec<usize>,
    #[serde(default)]
    pub dislikes: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeedbackResponse {
    pub results: Vec<ResultEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub demo_target_rank_before: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub demo_target_rank_after: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ItemView {
    pub id: usize,
    pub text: String,
    pub attributes: Vec<String>,
    pub image_uri: Option<String>,
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok", "items": state.dataset.len() }))
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    body: Result<Json<CreateSessionRequest>, JsonRejection>,
) -> Result<(StatusCode, Json<CreateSessionResponse>), ApiError> {
    let Json(req) = body?;
    let n = state.dataset.len();
    let k = req.k.unwrap_or(state.config.default_k);
    if k == 0 || k > n {
        return Err(ApiError::unprocessable(format!("k = {k} out of range 1..={n}")));
    }
    if let Some(t) = req.demo_target.filter(|&t| t >= n) {
        return Err(ApiError::unprocessable(format!("demo_target {t} is not a catalog item")));
    }
    let session = Session::create(&state.dataset, &state.retriever, &req.query, k, req.demo_target)?;
    let response = CreateSessionResponse { session_id: session.id.clone(), results: session.shown_entries(&state.dataset) };
    state.evict_expired();
    state.sessions.lock().expect("session table poisoned").insert(session.id.clone(), Arc::new(Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(response)))
}

async fn submit_feedback(
    State(state): State<Arc<AppState>>,
    path: Result<Path<String>, PathRejection>,
    body: Result<Json<FeedbackRequest>, JsonRejection>,
) -> Result<Json<FeedbackResponse>, ApiError> {
    let Path(id) = path?;
    let handle = state.lookup(&id)?;
    let Json(req) = body?;
    let mut session = handle.lock().expect("session poisoned");
    session.last_used = Instant::now();
    let response = session.submit(&state.dataset, &state.retriever, &state.config.ranker, req.likes, req.dislikes)?;
    Ok(Json(response))
}

async fn get_session(
    State(state): State<Arc<AppState>>,
    path: Result<Path<String>, PathRejection>,
) -> Result<Json<SessionView>, ApiError> {
    let Path(id) = path?;
    let handle = state.lookup(&id)?;
    let mut session = handle.lock().expect("session poisoned");
    session.last_used = Instant::now();
    Ok(Json(session.view(&state.dataset)))
}

async fn get_item(
    State(state): State<Arc<AppState>>,
    path: Result<Path<usize>, PathRejection>,
) -> Result<Json<ItemView>, ApiError> {
    let Path(id) = path?;
    let item = state.dataset.item(id).ok_or_else(|| ApiError::not_found(format!("unknown item {id}")))?;
    Ok(Json(ItemView {
        id: item.id,
        text: item.text.clone(),
        attributes: item.attributes.clone(),
        image_uri: item.image_uri.clone(),
    }))
}

/// The `/v1` API.
pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", get(get_session))
        .route("/v1/sessions/{id}/feedback", post(submit_feedback))
        .route("/v1/items/{id}", get(get_item))
        .with_state(state)
}

/// Binds `addr` and serves the API until ctrl-c. When `static_dir` is given,
/// files under it are served for every non-API path.
pub async fn serve(addr: SocketAddr, state: Arc<AppState>, static_dir: Option<PathBuf>) -> std::io::Result<()> {
    let mut app = router(state.clone());
    if let Some(dir) = static_dir {
        app = app.fallback_service(tower_http::services::ServeDir::new(dir));
    }
    let app = app.layer(tower_http::trace::TraceLayer::new_for_http());

    let sweeper = state.clone();
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(Duration::from_secs(60));
        loop {
            tick.tick().await;
            let evicted = sweeper.evict_expired();
            if evicted > 0 {
                tracing::debug!(evicted, "expired sessions dropped");
            }
        }
    });

    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
