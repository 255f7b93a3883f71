//! HTTP JSON API over trained checkpoints and acquisition sessions.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::{Mutex, RwLock};

use vaem::checkpoint::{AnyModel, Checkpoint};
use vaem::data::ColumnKind;
use vaem::model::TabularModel;
use vaem::rng::derive_seed;
use vaem::saia::SaiaConfig;

use crate::session::{AcquisitionSession, Recommendation, SessionError, SCHEMA_VERSION};

pub struct ModelEntry {
    pub id: String,
    pub model: AnyModel,
    pub config_hash: String,
}

impl ModelEntry {
    pub fn from_checkpoint(id: impl Into<String>, ck: Checkpoint) -> Self {
        ModelEntry {
            id: id.into(),
            model: ck.model,
            config_hash: ck.config_hash,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub saia: SaiaConfig,
    /// Session snapshots are written here on every mutation when set.
    pub snapshot_dir: Option<PathBuf>,
    /// Base for the seeds of sessions created without one.
    pub seed: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            saia: SaiaConfig {
                mc_samples: 100,
                ..SaiaConfig::default()
            },
            snapshot_dir: None,
            seed: 0,
        }
    }
}

struct SessionSlot {
    session: AcquisitionSession,
    /// Ranking computed for the current step, reused by the next observation.
    offered: Option<Recommendation>,
}

pub struct AppState {
    models: BTreeMap<String, Arc<ModelEntry>>,
    sessions: RwLock<HashMap<String, Arc<Mutex<SessionSlot>>>>,
    next_id: AtomicU64,
    closed: AtomicBool,
    config: ServiceConfig,
}

pub type SharedState = Arc<AppState>;

impl AppState {
    /// Loads any snapshots in the configured directory whose model is served.
    pub fn new(models: Vec<ModelEntry>, config: ServiceConfig) -> anyhow::Result<SharedState> {
        let mut by_id = BTreeMap::new();
        for m in models {
            let id = m.id.clone();
            if by_id.insert(id.clone(), Arc::new(m)).is_some() {
                anyhow::bail!("duplicate model id '{id}'");
            }
        }
        let mut sessions = HashMap::new();
        let mut next = 1;
        if let Some(dir) = &config.snapshot_dir {
            std::fs::create_dir_all(dir).map_err(|e| anyhow::anyhow!("{}: {e}", dir.display()))?;
            for s in load_snapshots(dir)? {
                if !by_id.contains_key(&s.model_id) {
                    log::warn!("session {} refers to unknown model '{}'; skipped", s.id, s.model_id);
                    continue;
                }
                if let Some(n) = s.id.strip_prefix('s').and_then(|n| n.parse::<u64>().ok()) {
                    next = next.max(n + 1);
                }
                log::info!("resumed session {}", s.id);
                sessions.insert(s.id.clone(), Arc::new(Mutex::new(SessionSlot { session: s, offered: None })));
            }
        }
        Ok(Arc::new(AppState {
            models: by_id,
            sessions: RwLock::new(sessions),
            next_id: AtomicU64::new(next),
            closed: AtomicBool::new(false),
            config,
        }))
    }

    /// Every later session request answers 410 Gone.
    pub fn close_sessions(&self) {
        self.closed.store(true, Ordering::SeqCst);
    }

    fn snapshot(&self, session: &AcquisitionSession) -> Result<(), ApiError> {
        let Some(dir) = &self.config.snapshot_dir else {
            return Ok(());
        };
        let doc = json!({ "schema_version": SCHEMA_VERSION, "session": session });
        let path = dir.join(format!("{}.json", session.id));
        let tmp = dir.join(format!("{}.json.tmp", session.id));
        std::fs::write(&tmp, serde_json::to_vec_pretty(&doc).map_err(ApiError::internal)?)
            .and_then(|_| std::fs::rename(&tmp, &path))
            .map_err(|e| ApiError::internal(format!("{}: {e}", path.display())))
    }
}

fn load_snapshots(dir: &Path) -> anyhow::Result<Vec<AcquisitionSession>> {
    #[derive(Deserialize)]
    struct Snapshot {
        schema_version: u32,
        session: AcquisitionSession,
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("json") {
            continue;
        }
        let snap: Snapshot = serde_json::from_slice(&std::fs::read(&path)?)
            .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        if snap.schema_version != SCHEMA_VERSION {
            anyhow::bail!("{}: unsupported schema_version {}", path.display(), snap.schema_version);
        }
        out.push(snap.session);
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

// ---------------------------------------------------------------------------
// Errors

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    field: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
            field: None,
        }
    }

    fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", format!("unknown {what} '{id}'"))
    }

    fn gone() -> Self {
        Self::new(StatusCode::GONE, "gone", "the service is shutting down; sessions are closed")
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        match e {
            SessionError::Invalid { field, reason } => ApiError {
                status: StatusCode::UNPROCESSABLE_ENTITY,
                code: "invalid_value",
                message: format!("invalid value for '{field}': {reason}"),
                field: Some(field),
            },
            SessionError::NotCandidate(f) => ApiError {
                status: StatusCode::CONFLICT,
                code: "not_a_candidate",
                message: format!("feature '{f}' is not a candidate"),
                field: Some(f),
            },
            SessionError::Model(vaem::error::Error::InvalidObservation { field, reason }) => ApiError {
                status: StatusCode::UNPROCESSABLE_ENTITY,
                code: "invalid_value",
                message: reason,
                field: Some(field),
            },
            SessionError::Model(e) => ApiError::internal(e),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_body", e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut error = json!({ "code": self.code, "message": self.message });
        if let Some(f) = self.field {
            error["field"] = Value::String(f);
        }
        (self.status, Json(json!({ "schema_version": SCHEMA_VERSION, "error": error }))).into_response()
    }
}

type ApiResult = Result<Response, ApiError>;

fn ok(status: StatusCode, body: Value) -> ApiResult {
    let mut body = body;
    body["schema_version"] = json!(SCHEMA_VERSION);
    Ok((status, Json(body)).into_response())
}

// ---------------------------------------------------------------------------
// Payloads

#[derive(Serialize)]
struct ColumnInfo {
    index: usize,
    name: String,
    kind: &'static str,
    is_target: bool,
    min: f64,
    max: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    grid: Option<Vec<f64>>,
}

fn model_info(m: &ModelEntry) -> Value {
    let schema = m.model.schema();
    let columns: Vec<ColumnInfo> = schema
        .columns
        .iter()
        .enumerate()
        .map(|(index, c)| ColumnInfo {
            index,
            name: c.name.clone(),
            kind: c.kind.name(),
            is_target: c.is_target,
            min: c.min,
            max: c.max,
            labels: match &c.kind {
                ColumnKind::Categorical { labels } => Some(labels.clone()),
                ColumnKind::Ordinal { levels } => Some(levels.clone()),
                _ => None,
            },
            grid: match &c.kind {
                ColumnKind::DiscreteContinuous { grid } => Some(grid.clone()),
                _ => None,
            },
        })
        .collect();
    json!({
        "id": m.id,
        "kind": m.model.kind().name(),
        "config_hash": m.config_hash,
        "target": schema.columns[schema.target()].name,
        "columns": columns,
    })
}

fn session_view(s: &AcquisitionSession, model: &AnyModel) -> Value {
    let schema = model.schema();
    let candidates: Vec<Value> = s
        .candidates
        .iter()
        .map(|&c| json!({ "index": c, "feature": schema.columns[c].name }))
        .collect();
    let observed: Vec<Value> = s
        .observed
        .iter()
        .map(|o| json!({ "index": o.index, "feature": o.feature, "value": o.value }))
        .collect();
    json!({
        "id": s.id,
        "model_id": s.model_id,
        "target": { "index": s.target, "feature": schema.columns[s.target].name },
        "status": s.status(),
        "step": s.step(),
        "seed": s.seed,
        "observed": observed,
        "candidates": candidates,
        "prediction": s.current_prediction(),
        "history": s.history,
    })
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    #[serde(default)]
    pub observations: BTreeMap<String, Value>,
    pub seed: Option<u64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObserveRequest {
    pub feature: String,
    pub value: Value,
}

// ---------------------------------------------------------------------------
// Handlers

pub fn router(state: SharedState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/models", get(list_models))
        .route("/models/{id}/sessions", post(create_session))
        .route("/sessions/{sid}", get(get_session))
        .route("/sessions/{sid}/recommendation", get(get_recommendation))
        .route("/sessions/{sid}/observe", post(observe))
        .route("/sessions/{sid}/curve", get(get_curve))
        .with_state(state)
}

async fn health(State(state): State<SharedState>) -> ApiResult {
    let sessions = state.sessions.read().await.len();
    ok(StatusCode::OK, json!({ "status": "ok", "models": state.models.len(), "sessions": sessions }))
}

async fn list_models(State(state): State<SharedState>) -> ApiResult {
    let models: Vec<Value> = state.models.values().map(|m| model_info(m)).collect();
    ok(StatusCode::OK, json!({ "models": models }))
}

async fn lookup(state: &AppState, sid: &str) -> Result<(Arc<Mutex<SessionSlot>>, Arc<ModelEntry>), ApiError> {
    if state.closed.load(Ordering::SeqCst) {
        return Err(ApiError::gone());
    }
    let slot = state
        .sessions
        .read()
        .await
        .get(sid)
        .cloned()
        .ok_or_else(|| ApiError::not_found("session", sid))?;
    let model_id = slot.lock().await.session.model_id.clone();
    let model = state.models.get(&model_id).cloned().ok_or_else(|| ApiError::not_found("model", &model_id))?;
    Ok((slot, model))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)
}

async fn create_session(
    State(state): State<SharedState>,
    UrlPath(id): UrlPath<String>,
    body: axum::body::Bytes,
) -> ApiResult {
    if state.closed.load(Ordering::SeqCst) {
        return Err(ApiError::gone());
    }
    let model = state.models.get(&id).cloned().ok_or_else(|| ApiError::not_found("model", &id))?;
    let req: CreateSession = if body.iter().all(u8::is_ascii_whitespace) {
        CreateSession::default()
    } else {
        serde_json::from_slice(&body)
            .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_body", e.to_string()))?
    };
    let n = state.next_id.fetch_add(1, Ordering::SeqCst);
    let sid = format!("s{n:06}");
    let seed = req.seed.unwrap_or_else(|| derive_seed(state.config.seed, &[n]));
    let saia = state.config.saia.clone();
    let m = model.clone();
    let session = blocking(move || AcquisitionSession::create(sid, id, &m.model, &req.observations, seed, saia)).await??;
    state.snapshot(&session)?;
    let view = session_view(&session, &model.model);
    state
        .sessions
        .write()
        .await
        .insert(session.id.clone(), Arc::new(Mutex::new(SessionSlot { session, offered: None })));
    ok(StatusCode::CREATED, view)
}

async fn get_session(State(state): State<SharedState>, UrlPath(sid): UrlPath<String>) -> ApiResult {
    let (slot, model) = lookup(&state, &sid).await?;
    let guard = slot.lock().await;
    ok(StatusCode::OK, session_view(&guard.session, &model.model))
}

async fn get_recommendation(State(state): State<SharedState>, UrlPath(sid): UrlPath<String>) -> ApiResult {
    let (slot, model) = lookup(&state, &sid).await?;
    let mut guard = slot.clone().lock_owned().await;
    let step = guard.session.step();
    let rec = match &guard.offered {
        Some(r) if r.step == step => r.clone(),
        _ => {
            let (rec, g) = blocking(move || {
                let r = guard.session.recommend(&model.model);
                (r, guard)
            })
            .await?;
            guard = g;
            let rec = rec.map_err(SessionError::from)?;
            guard.offered = Some(rec.clone());
            rec
        }
    };
    let mut body = serde_json::to_value(&rec).map_err(ApiError::internal)?;
    body["session_id"] = json!(sid);
    ok(StatusCode::OK, body)
}

async fn observe(
    State(state): State<SharedState>,
    UrlPath(sid): UrlPath<String>,
    body: Result<Json<ObserveRequest>, JsonRejection>,
) -> ApiResult {
    let (slot, model) = lookup(&state, &sid).await?;
    let Json(req) = body?;
    let guard = slot.lock_owned().await;
    let m = model.clone();
    let (result, guard) = blocking(move || {
        let mut guard = guard;
        let offered = guard.offered.take();
        let r = guard
            .session
            .observe(&m.model, &req.feature, &req.value, offered)
            .cloned();
        (r, guard)
    })
    .await?;
    let entry = result?;
    state.snapshot(&guard.session)?;
    let mut view = session_view(&guard.session, &model.model);
    view["observation"] = serde_json::to_value(&entry).map_err(ApiError::internal)?;
    ok(StatusCode::OK, view)
}

async fn get_curve(State(state): State<SharedState>, UrlPath(sid): UrlPath<String>) -> ApiResult {
    let (slot, _) = lookup(&state, &sid).await?;
    let guard = slot.lock().await;
    ok(StatusCode::OK, json!({ "session_id": sid, "steps": guard.session.curve() }))
}

/// Binds `addr` and serves until `shutdown` resolves; sessions are closed
/// before in-flight requests drain.
pub async fn serve(
    state: SharedState,
    listener: tokio::net::TcpListener,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let app = router(state.clone());
    axum::serve(listener, app)
        .with_graceful_shutdown(async move {
            shutdown.await;
            log::info!("shutting down; closing sessions");
            state.close_sessions();
        })
        .await
}
