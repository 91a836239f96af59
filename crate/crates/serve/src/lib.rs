//! HTTP service for pairwise labeling sessions and conditioned generation.
//!
//! Routes (all JSON, errors are `{code, message}`):
//!
//! ```text
//! POST /api/session               {labeler_id}                -> {session_id, seed, total}
//! GET  /api/session/{id}/next                                 -> {pair_id, task, prompt, left, right, axes}
//! GET  /api/session/{id}/progress                             -> {session_id, completed, total, remaining}
//! POST /api/labels                {pair_id, axis, verdict, labeler_id}
//! GET  /api/tally                                             -> {axis: {n, win, neutral, loss}}
//! GET  /api/export?min_labelers=&task=                        -> normalized records, one JSON per line
//! POST /api/generate              {prompt, condition?, params?, seed?} -> {text}
//! ```

pub mod session;
pub mod store;

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use parking_lot::Mutex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tower_http::services::ServeDir;

use hindsight_core::corpus::Task;
use hindsight_core::gen::{generate, GenError, SamplingParams};
use hindsight_core::model::ModelParams;

use session::{LabelPair, Progress, ServedPair, Session};
use store::{export_preferences, tally, Axis, LabelRecord, LabelStore, Tally, Verdict};

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("session exhausted after {completed} completed pairs")]
    SessionExhausted { completed: usize },
    #[error("label for pair {pair_id}, axis {axis:?}, labeler {labeler_id} already recorded")]
    DuplicateLabel { pair_id: String, axis: Axis, labeler_id: String },
    #[error("unknown pair {0}")]
    UnknownPair(String),
    #[error("pair {pair_id} was not served to labeler {labeler_id}")]
    NotServed { pair_id: String, labeler_id: String },
    #[error("axis `{axis}` is not labeled for {task} pairs")]
    InvalidAxis { axis: String, task: Task },
    #[error("no pair has at least {min_labelers} overall labels")]
    InsufficientLabels { min_labelers: usize },
    #[error("no model checkpoint loaded")]
    ModelUnavailable,
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error("label store: {0}")]
    Store(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ServeError {
    pub fn code(&self) -> &'static str {
        match self {
            ServeError::UnknownSession(_) => "unknown_session",
            ServeError::SessionExhausted { .. } => "session_exhausted",
            ServeError::DuplicateLabel { .. } => "duplicate_label",
            ServeError::UnknownPair(_) => "unknown_pair",
            ServeError::NotServed { .. } => "not_served",
            ServeError::InvalidAxis { .. } => "invalid_axis",
            ServeError::InsufficientLabels { .. } => "insufficient_labels",
            ServeError::ModelUnavailable => "model_unavailable",
            ServeError::BadRequest(_) => "bad_request",
            ServeError::Gen(_) => "generation_error",
            ServeError::Store(_) | ServeError::Io(_) => "internal",
        }
    }

    fn status(&self) -> StatusCode {
        match self {
            ServeError::UnknownSession(_) | ServeError::UnknownPair(_) => StatusCode::NOT_FOUND,
            ServeError::SessionExhausted { .. } => StatusCode::GONE,
            ServeError::DuplicateLabel { .. } => StatusCode::CONFLICT,
            ServeError::NotServed { .. } => StatusCode::FORBIDDEN,
            ServeError::InvalidAxis { .. } | ServeError::BadRequest(_) | ServeError::Gen(_) => StatusCode::BAD_REQUEST,
            ServeError::InsufficientLabels { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            ServeError::ModelUnavailable => StatusCode::SERVICE_UNAVAILABLE,
            ServeError::Store(_) | ServeError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub completed: Option<usize>,
}

impl IntoResponse for ServeError {
    fn into_response(self) -> Response {
        if self.status() == StatusCode::INTERNAL_SERVER_ERROR {
            tracing::error!("{self}");
        }
        let completed = match self {
            ServeError::SessionExhausted { completed } => Some(completed),
            _ => None,
        };
        let body = ErrorBody { code: self.code().into(), message: self.to_string(), completed };
        (self.status(), Json(body)).into_response()
    }
}

/// JSON body whose parse failures become `400 bad_request`.
struct ApiJson<T>(T);

impl<T: DeserializeOwned, S: Send + Sync> axum::extract::FromRequest<S> for ApiJson<T> {
    type Rejection = ServeError;

    async fn from_request(req: axum::extract::Request, state: &S) -> Result<Self, Self::Rejection> {
        let bytes = Bytes::from_request(req, state).await.map_err(|e| ServeError::BadRequest(e.to_string()))?;
        serde_json::from_slice(&bytes).map(ApiJson).map_err(|e| ServeError::BadRequest(e.to_string()))
    }
}

pub struct AppState {
    pub pairs: Vec<LabelPair>,
    index: HashMap<String, usize>,
    pub store: LabelStore,
    sessions: Mutex<HashMap<String, Session>>,
    pub model: Option<Arc<ModelParams<f32>>>,
    pub seed: u64,
}

impl AppState {
    pub fn new(pairs: Vec<LabelPair>, store: LabelStore, model: Option<ModelParams<f32>>, seed: u64) -> Self {
        let index = pairs.iter().enumerate().map(|(i, p)| (p.pair_id.clone(), i)).collect();
        AppState { pairs, index, store, sessions: Mutex::new(HashMap::new()), model: model.map(Arc::new), seed }
    }
}

type Shared = Arc<AppState>;

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionRequest {
    pub labeler_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session_id: String,
    pub seed: u64,
    pub total: usize,
}

async fn create_session(
    State(s): State<Shared>,
    ApiJson(req): ApiJson<SessionRequest>,
) -> Result<Json<SessionInfo>, ServeError> {
    let id = req.labeler_id.trim();
    if id.is_empty() {
        return Err(ServeError::BadRequest("labeler_id must be non-empty".into()));
    }
    let mut sessions = s.sessions.lock();
    let session = sessions.entry(id.to_string()).or_insert_with(|| Session::new(id, s.seed));
    Ok(Json(SessionInfo { session_id: id.to_string(), seed: session.seed, total: s.pairs.len() }))
}

async fn next_pair(State(s): State<Shared>, Path(id): Path<String>) -> Result<Json<ServedPair>, ServeError> {
    let mut sessions = s.sessions.lock();
    let session = sessions.get_mut(&id).ok_or(ServeError::UnknownSession(id))?;
    Ok(Json(session.next(&s.pairs, &s.store)?))
}

async fn progress(State(s): State<Shared>, Path(id): Path<String>) -> Result<Json<Progress>, ServeError> {
    let sessions = s.sessions.lock();
    let session = sessions.get(&id).ok_or_else(|| ServeError::UnknownSession(id.clone()))?;
    let completed = session.completed(&s.pairs, &s.store);
    Ok(Json(Progress { session_id: id, completed, total: s.pairs.len(), remaining: s.pairs.len() - completed }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LabelRequest {
    pub pair_id: String,
    pub axis: String,
    pub verdict: Verdict,
    pub labeler_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Ack {
    pub stored: usize,
}

async fn submit_label(State(s): State<Shared>, ApiJson(req): ApiJson<LabelRequest>) -> Result<Json<Ack>, ServeError> {
    let &i = s.index.get(&req.pair_id).ok_or_else(|| ServeError::UnknownPair(req.pair_id.clone()))?;
    let pair = &s.pairs[i];
    let axis = Axis::parse(&req.axis)
        .filter(|a| Axis::for_task(pair.task).contains(a))
        .ok_or_else(|| ServeError::InvalidAxis { axis: req.axis.clone(), task: pair.task })?;
    let swapped = {
        let sessions = s.sessions.lock();
        let session = sessions.get(&req.labeler_id).filter(|sess| sess.was_served(i)).ok_or_else(|| {
            ServeError::NotServed { pair_id: req.pair_id.clone(), labeler_id: req.labeler_id.clone() }
        })?;
        session.swapped(i)
    };
    let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64);
    s.store.append(LabelRecord {
        pair_id: req.pair_id,
        axis,
        verdict: req.verdict,
        labeler_id: req.labeler_id,
        timestamp,
        swapped,
    })?;
    Ok(Json(Ack { stored: s.store.snapshot().len() }))
}

async fn tally_handler(State(s): State<Shared>) -> Json<BTreeMap<Axis, Tally>> {
    Json(tally(&s.store.snapshot()))
}

#[derive(Debug, Deserialize)]
struct ExportQuery {
    #[serde(default = "one")]
    min_labelers: usize,
    task: Option<String>,
}

fn one() -> usize {
    1
}

fn parse_task(s: &str) -> Result<Task, ServeError> {
    match s {
        "summary" => Ok(Task::Summary),
        "dialogue" => Ok(Task::Dialogue),
        "qa" => Ok(Task::Qa),
        other => Err(ServeError::BadRequest(format!("unknown task `{other}`"))),
    }
}

async fn export(State(s): State<Shared>, Query(q): Query<ExportQuery>) -> Result<Response, ServeError> {
    let task = q.task.as_deref().map(parse_task).transpose()?;
    let corpus = export_preferences(&s.store.snapshot(), &s.pairs, q.min_labelers, task)?;
    let mut body = String::new();
    for r in &corpus.records {
        body.push_str(&serde_json::to_string(r).map_err(|e| ServeError::Store(e.to_string()))?);
        body.push('\n');
    }
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub prompt: String,
    #[serde(default = "good")]
    pub condition: String,
    #[serde(default)]
    pub params: Option<SamplingParams>,
    #[serde(default)]
    pub seed: u64,
}

fn good() -> String {
    "Good:".into()
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub text: String,
}

async fn generate_handler(
    State(s): State<Shared>,
    ApiJson(req): ApiJson<GenerateRequest>,
) -> Result<Json<GenerateResponse>, ServeError> {
    let model = s.model.clone().ok_or(ServeError::ModelUnavailable)?;
    let params = req.params.unwrap_or_default();
    params.validate()?;
    let text = tokio::task::spawn_blocking(move || {
        let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
        generate(&model, &req.prompt, &req.condition, &params, &mut rng)
    })
    .await
    .map_err(|e| ServeError::Store(format!("generation task failed: {e}")))??;
    Ok(Json(GenerateResponse { text }))
}

pub fn router(state: Shared, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/session", post(create_session))
        .route("/api/session/{id}/next", get(next_pair))
        .route("/api/session/{id}/progress", get(progress))
        .route("/api/labels", post(submit_label))
        .route("/api/tally", get(tally_handler))
        .route("/api/export", get(export))
        .route("/api/generate", post(generate_handler))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub addr: SocketAddr,
    pub static_dir: Option<PathBuf>,
}

/// Serves until ctrl-c.
pub async fn run(state: AppState, cfg: ServeConfig) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(cfg.addr).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(state), cfg.static_dir))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
