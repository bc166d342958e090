//! HTTP API over the decision engine.
//!
//! | Method | Path | Body / query | Response |
//! |---|---|---|---|
//! | POST | `/v1/decide` | `{user_id, request, model, thresholds?, statement?}` | `{outcome, deferral_id}` |
//! | GET | `/v1/deferrals` | `?user_id=` | pending entries, oldest first |
//! | POST | `/v1/deferrals/{id}/resolve` | `{decision}` | resolved entry |
//! | POST | `/v1/statements` | privacy statement | `{user_id}` |
//! | POST | `/v1/feedback` | feedback record | `{stored}` |
//! | GET | `/v1/feedback` | `?user_id=` | feedback records |
//! | GET | `/v1/examples` | `?user_id=` | the user's example store |
//! | GET | `/v1/metrics/summary` | | report tables |
//!
//! Errors are `{status, code, message}`. A backend failure answers 502 but
//! still carries the deferred outcome and its queue id.

pub mod config;

use std::path::Path;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use permgate_core::backend::{DecisionBackend, RemoteBackend, ScriptEntry, ScriptedBackend};
use permgate_core::dataset::{self, bundled, synthetic, CorpusPaths};
use permgate_core::engine::{
    DeferralId, EngineConfig, EngineError, FeedbackRecord, Mediation, PolicyEngine,
};
use permgate_core::jsonl;
use permgate_core::model::{PrivacyStatement, UserDecision, UserId};
use permgate_core::report::{Evaluation, GenericDecisions, ReportTable};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use thiserror::Error;

pub use config::{BackendSelection, ConfigError, MetricsConfig, ServiceConfig};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    pub status: u16,
    pub code: String,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status: status.as_u16(),
            code: code.to_owned(),
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_body", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let status = match &e {
            EngineError::Invalid(_) => StatusCode::BAD_REQUEST,
            EngineError::UnknownDeferral(_) => StatusCode::NOT_FOUND,
            EngineError::AlreadyResolved(_) => StatusCode::CONFLICT,
            EngineError::Storage(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let code = match &e {
            EngineError::Invalid(_) => "invalid_body",
            EngineError::UnknownDeferral(_) => "unknown_deferral",
            EngineError::AlreadyResolved(_) => "already_resolved",
            EngineError::Storage(_) => "storage",
        };
        Self::new(status, code, e.to_string())
    }
}

#[derive(Debug, Error)]
pub enum StartupError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("backend: {0}")]
    Backend(String),
    #[error("metrics corpus: {0}")]
    Corpus(#[from] dataset::DatasetError),
    #[error("engine: {0}")]
    Engine(#[from] EngineError),
}

#[derive(Clone)]
pub struct AppState {
    pub engine: Arc<PolicyEngine>,
    /// Immutable snapshot behind `/v1/metrics/summary`.
    pub metrics: Option<Arc<Evaluation>>,
}

pub const BUNDLED_MODELS: [&str; 2] = ["gpt-4o", "mistral"];

fn load_scripts(paths: &[impl AsRef<Path>]) -> Result<Vec<ScriptEntry>, StartupError> {
    let mut entries = Vec::new();
    for p in paths {
        entries.extend(
            jsonl::read::<ScriptEntry>(p.as_ref(), permgate_core::backend::SCRIPT_SCHEMA)
                .map_err(|e| StartupError::Backend(e.to_string()))?,
        );
    }
    Ok(entries)
}

pub fn build_backend(
    selection: &BackendSelection,
) -> Result<Arc<dyn DecisionBackend>, StartupError> {
    Ok(match selection {
        BackendSelection::Scripted {
            scripts,
            include_bundled,
        } => {
            let mut entries = load_scripts(scripts)?;
            if *include_bundled {
                entries.extend(bundled::generic_scripts());
            }
            Arc::new(
                ScriptedBackend::from_entries(entries)
                    .map_err(|e| StartupError::Backend(e.to_string()))?,
            )
        }
        BackendSelection::Remote(remote) => Arc::new(
            RemoteBackend::new(remote.clone()).map_err(|e| StartupError::Backend(e.to_string()))?,
        ),
    })
}

pub fn build_metrics(config: &MetricsConfig) -> Result<Evaluation, StartupError> {
    if config.corpus == "bundled" {
        let models: Vec<String> = if config.generic_models.is_empty() {
            BUNDLED_MODELS.iter().map(|m| m.to_string()).collect()
        } else {
            config.generic_models.clone()
        };
        return Ok(Evaluation::bundled(&models, synthetic::DEFAULT_SEED)?);
    }
    let corpus = dataset::load_corpus(&CorpusPaths::in_dir(Path::new(&config.corpus)))?;
    let scripts = load_scripts(&config.generic_scripts)?;
    let mut models = config.generic_models.clone();
    if models.is_empty() {
        models = scripts.iter().map(|e| e.model_id.clone()).collect();
        models.sort();
        models.dedup();
    }
    let generic = models
        .iter()
        .map(|m| GenericDecisions::from_scripts(&scripts, m))
        .collect();
    Ok(Evaluation::from_corpus(corpus, generic))
}

/// Builds engine, backend and metrics. Call outside an async context: the
/// remote backend owns a blocking HTTP client.
pub fn build_state(config: &ServiceConfig) -> Result<AppState, StartupError> {
    let backend = build_backend(&config.backend)?;
    let engine_config = EngineConfig {
        default_thresholds: config.thresholds,
        example_seed: config.example_seed,
        ..EngineConfig::default()
    };
    let mut engine = PolicyEngine::new(backend, engine_config);
    if let Some(path) = &config.audit_log {
        engine = engine.with_audit_log(path)?;
    }
    let metrics = config
        .metrics
        .as_ref()
        .map(build_metrics)
        .transpose()?
        .map(Arc::new);
    Ok(AppState {
        engine: Arc::new(engine),
        metrics,
    })
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/decide", post(decide))
        .route("/v1/deferrals", get(list_deferrals))
        .route("/v1/deferrals/{id}/resolve", post(resolve))
        .route("/v1/statements", post(register_statement))
        .route("/v1/feedback", post(post_feedback).get(get_feedback))
        .route("/v1/examples", get(examples))
        .route("/v1/metrics/summary", get(metrics_summary))
        .with_state(state)
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(e.to_string()))
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> T + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecideResponse {
    pub outcome: permgate_core::engine::PolicyOutcome,
    pub deferral_id: Option<DeferralId>,
}

/// Body of a 502 answer: the error plus the fail-closed outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendFailure {
    #[serde(flatten)]
    pub error: ApiError,
    pub outcome: permgate_core::engine::PolicyOutcome,
    pub deferral_id: Option<DeferralId>,
}

async fn decide(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let mediation: Mediation = parse_body(&body)?;
    let engine = state.engine.clone();
    let result = blocking(move || engine.mediate(&mediation)).await??;
    let deferral_id = result.deferral.map(|d| d.id);
    match result.outcome.error.clone() {
        Some(err) => Ok((
            StatusCode::BAD_GATEWAY,
            Json(BackendFailure {
                error: ApiError::new(StatusCode::BAD_GATEWAY, "backend_failure", err.to_string()),
                outcome: result.outcome,
                deferral_id,
            }),
        )
            .into_response()),
        None => Ok(Json(DecideResponse {
            outcome: result.outcome,
            deferral_id,
        })
        .into_response()),
    }
}

#[derive(Debug, Deserialize)]
struct UserQuery {
    user_id: Option<String>,
}

async fn list_deferrals(State(state): State<AppState>, Query(q): Query<UserQuery>) -> Response {
    let user = q.user_id.map(UserId::new);
    Json(state.engine.list_pending(user.as_ref())).into_response()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ResolveBody {
    decision: UserDecision,
}

async fn resolve(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let ResolveBody { decision } = parse_body(&body)?;
    let engine = state.engine.clone();
    let entry = blocking(move || engine.resolve_deferral(&DeferralId(id), decision)).await??;
    Ok(Json(entry).into_response())
}

async fn register_statement(
    State(state): State<AppState>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let statement: PrivacyStatement = parse_body(&body)?;
    let user_id = statement.user_id.clone();
    state.engine.register_statement(statement)?;
    Ok(Json(serde_json::json!({ "user_id": user_id })).into_response())
}

async fn post_feedback(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let feedback: FeedbackRecord = parse_body(&body)?;
    let engine = state.engine.clone();
    let ack = blocking(move || engine.record_feedback(feedback)).await??;
    Ok(Json(ack).into_response())
}

async fn get_feedback(State(state): State<AppState>, Query(q): Query<UserQuery>) -> Response {
    let user = q.user_id.map(UserId::new);
    Json(state.engine.feedback_for(user.as_ref())).into_response()
}

async fn examples(
    State(state): State<AppState>,
    Query(q): Query<UserQuery>,
) -> Result<Response, ApiError> {
    let user = q
        .user_id
        .map(UserId::new)
        .ok_or_else(|| ApiError::bad_request("user_id is required"))?;
    Ok(Json(state.engine.example_store(&user)).into_response())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub tables: Vec<ReportTable>,
}

async fn metrics_summary(State(state): State<AppState>) -> Result<Response, ApiError> {
    let snapshot = state.metrics.clone().ok_or_else(|| {
        ApiError::new(
            StatusCode::CONFLICT,
            "no_corpus",
            "no evaluation corpus is loaded",
        )
    })?;
    let tables = blocking(move || snapshot.reports()).await?;
    Ok(Json(MetricsSummary { tables }).into_response())
}

/// Serves until the task is cancelled.
pub async fn serve(state: AppState, bind: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    axum::serve(listener, router(state)).await
}
