//! HTTP/JSON facade over [`tmem_core::engine::Engine`].
//!
//! Handlers parse, delegate to the engine on the blocking pool and serialize
//! the engine's own result types; the service adds no semantics of its own
//! beyond background extraction jobs and the single-consolidation guard.

pub mod jobs;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::rejection::QueryRejection;
use axum::extract::{Path, Query, Request, State};
use axum::http::StatusCode;
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use schemars::schema_for;
use serde::Deserialize;
use tmem_core::api::{ErrorBody, ExtractMode, IngestResponse, RetrieveRequest, RetrieveResponse, TipsQuery};
use tmem_core::curation::ConsolidationReport;
use tmem_core::engine::{Engine, EngineError, ErrorKind};
use tmem_core::model::{RawTrajectory, Tip};
use tmem_core::store::StoreStats;

pub use jobs::{Job, JobRegistry, JobState};

/// Shared handler state.
#[derive(Clone)]
pub struct AppState {
    pub engine: Arc<Engine>,
    pub jobs: Arc<JobRegistry>,
    consolidating: Arc<AtomicBool>,
}

impl AppState {
    pub fn new(engine: Arc<Engine>) -> Self {
        AppState { engine, jobs: Arc::new(JobRegistry::default()), consolidating: Arc::new(AtomicBool::new(false)) }
    }
}

/// Error response: an HTTP status plus an [`ErrorBody`].
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, kind: ErrorKind, error: impl Into<String>) -> Self {
        ApiError { status, body: ErrorBody { error: error.into(), kind: kind.as_str().to_owned() } }
    }

    fn validation(error: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, ErrorKind::Validation, error)
    }

    fn internal(error: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, ErrorKind::Internal, error)
    }

    /// Validation failures become 422 instead of 400.
    fn unprocessable(mut self) -> Self {
        if self.status == StatusCode::BAD_REQUEST {
            self.status = StatusCode::UNPROCESSABLE_ENTITY;
        }
        self
    }
}

pub fn status_for(kind: ErrorKind) -> StatusCode {
    match kind {
        ErrorKind::Validation => StatusCode::BAD_REQUEST,
        ErrorKind::Conflict => StatusCode::CONFLICT,
        ErrorKind::NotFound => StatusCode::NOT_FOUND,
        ErrorKind::Gateway => StatusCode::BAD_GATEWAY,
        ErrorKind::Io | ErrorKind::Internal => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let kind = e.kind();
        ApiError::new(status_for(kind), kind, e.to_string())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(e: QueryRejection) -> Self {
        ApiError::validation(e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Runs `f` against the engine on the blocking pool.
async fn blocking<T, F>(state: &AppState, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&Engine) -> Result<T, EngineError> + Send + 'static,
{
    let engine = Arc::clone(&state.engine);
    tokio::task::spawn_blocking(move || f(&engine))
        .await
        .map_err(|e| ApiError::internal(format!("worker panicked: {e}")))?
        .map_err(ApiError::from)
}

fn parse_json<T: serde::de::DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::validation(format!("invalid request body: {e}")))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct IngestParams {
    extract: Option<String>,
}

async fn ingest(
    State(state): State<AppState>,
    params: Result<Query<IngestParams>, QueryRejection>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<IngestResponse>)> {
    let Query(params) = params?;
    let mode = match params.extract.as_deref() {
        None => None,
        Some(s) => Some(ExtractMode::parse(s).ok_or_else(|| ApiError::validation(format!("extract must be task, subtask or both, not `{s}`")))?),
    };
    let raw: RawTrajectory = parse_json(&body)?;
    let mut resp = blocking(&state, move |e| e.ingest(raw)).await?;
    if let Some(mode) = mode {
        let job = state.jobs.enqueue(&resp.id, mode);
        resp.job_id = Some(job.clone());
        let (engine, jobs, id) = (Arc::clone(&state.engine), Arc::clone(&state.jobs), resp.id.clone());
        tokio::task::spawn_blocking(move || {
            jobs.start(&job);
            match engine.extract(&id, mode) {
                Ok(summary) => jobs.finish(&job, summary),
                Err(e) => {
                    tracing::warn!(job = %job, error = %e, "extraction job failed");
                    jobs.fail(&job, ErrorBody { error: e.to_string(), kind: e.kind().as_str().to_owned() })
                }
            }
        });
    }
    Ok((StatusCode::CREATED, Json(resp)))
}

async fn job(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Job>> {
    state
        .jobs
        .get(&id)
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, ErrorKind::NotFound, format!("job `{id}` not found")))
}

async fn retrieve(State(state): State<AppState>, body: Bytes) -> ApiResult<Json<RetrieveResponse>> {
    let req: RetrieveRequest = parse_json(&body).map_err(ApiError::unprocessable)?;
    blocking(&state, move |e| e.retrieve(&req)).await.map(Json).map_err(ApiError::unprocessable)
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConsolidateRequest {
    threshold: Option<f64>,
}

/// Clears the consolidation flag when the job ends, even on panic.
struct ConsolidationGuard(Arc<AtomicBool>);

impl Drop for ConsolidationGuard {
    fn drop(&mut self) {
        self.0.store(false, Ordering::Release);
    }
}

async fn consolidate(State(state): State<AppState>, body: Bytes) -> ApiResult<Json<ConsolidationReport>> {
    let req: ConsolidateRequest = if body.iter().all(u8::is_ascii_whitespace) { ConsolidateRequest::default() } else { parse_json(&body)? };
    if state.consolidating.compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire).is_err() {
        return Err(ApiError::new(StatusCode::CONFLICT, ErrorKind::Conflict, "a consolidation is already running"));
    }
    let guard = ConsolidationGuard(Arc::clone(&state.consolidating));
    blocking(&state, move |e| {
        let _guard = guard;
        e.consolidate(req.threshold)
    })
    .await
    .map(Json)
}

async fn tips(State(state): State<AppState>, query: Result<Query<TipsQuery>, QueryRejection>) -> ApiResult<Json<Vec<Tip>>> {
    let Query(q) = query?;
    blocking(&state, move |e| e.tips(q)).await.map(Json)
}

async fn tip(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Tip>> {
    blocking(&state, move |e| e.tip(&id)).await.map(Json)
}

async fn stats(State(state): State<AppState>) -> Json<StoreStats> {
    Json(state.engine.stats())
}

async fn schemas() -> Json<BTreeMap<&'static str, serde_json::Value>> {
    Json(response_schemas())
}

/// JSON schema of every request and response body, keyed by name.
pub fn response_schemas() -> BTreeMap<&'static str, serde_json::Value> {
    fn v(s: schemars::schema::RootSchema) -> serde_json::Value {
        serde_json::to_value(s).expect("schemas serialize")
    }
    BTreeMap::from([
        ("trajectory", v(schema_for!(RawTrajectory))),
        ("ingest_response", v(schema_for!(IngestResponse))),
        ("job", v(schema_for!(Job))),
        ("retrieve_request", v(schema_for!(RetrieveRequest))),
        ("retrieve_response", v(schema_for!(RetrieveResponse))),
        ("consolidation_report", v(schema_for!(ConsolidationReport))),
        ("tip", v(schema_for!(Tip))),
        ("tip_list", v(schema_for!(Vec<Tip>))),
        ("stats", v(schema_for!(StoreStats))),
        ("error", v(schema_for!(ErrorBody))),
    ])
}

/// One JSON-lines record per request through `tracing`.
async fn access_log(req: Request, next: Next) -> Response {
    let method = req.method().clone();
    let path = req.uri().path().to_owned();
    let start = Instant::now();
    let resp = next.run(req).await;
    tracing::info!(
        target: "tmem_service::access",
        method = %method,
        path = %path,
        status = resp.status().as_u16(),
        latency_ms = start.elapsed().as_secs_f64() * 1e3,
        "request"
    );
    resp
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, ErrorKind::NotFound, "no such endpoint")
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/trajectories", post(ingest))
        .route("/v1/jobs/{id}", get(job))
        .route("/v1/retrieve", post(retrieve))
        .route("/v1/consolidate", post(consolidate))
        .route("/v1/tips", get(tips))
        .route("/v1/tips/{id}", get(tip))
        .route("/v1/stats", get(stats))
        .route("/v1/schemas", get(schemas))
        .fallback(not_found)
        .layer(middleware::from_fn(access_log))
        .with_state(state)
}

/// Serves until ctrl-c.
pub async fn serve(engine: Arc<Engine>, listener: tokio::net::TcpListener) -> anyhow::Result<()> {
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(AppState::new(engine)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
