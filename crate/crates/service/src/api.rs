//! Versioned HTTP API.

use std::collections::HashMap;
use std::convert::Infallible;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::{Body, Bytes};
use axum::extract::rejection::QueryRejection;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use air_core::backend::Backends;
use air_core::filter::FilterParams;
use air_core::manifest::load_dataset;
use air_core::model::ContextGrammar;
use air_core::pipeline::jobs::{JobContext, JobKind, JobManager};
use air_core::pipeline::{aug_dataset_id, gen_dataset_id, PipelineConfig};
use air_core::trainer::{MergeFraction, TrainConfig};
use air_core::Error;

use crate::ops::{self, DatasetSummary, TrainRequest, METRICS_FILE};
use crate::store::Store;

pub const DEFAULT_HEARTBEAT: Duration = Duration::from_secs(10);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    Validation,
    NotFound,
    BackendUnavailable,
    Conflict,
    Internal,
}

/// Body of every non-2xx response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<Value>,
    #[serde(skip)]
    pub status: u16,
}

impl ApiError {
    pub fn new(status: StatusCode, code: ErrorCode, message: impl Into<String>) -> Self {
        ApiError {
            code,
            message: message.into(),
            detail: None,
            status: status.as_u16(),
        }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, ErrorCode::Validation, message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, ErrorCode::NotFound, message)
    }

    pub fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, ErrorCode::Conflict, message)
    }

    fn with_detail(mut self, detail: Value) -> Self {
        self.detail = Some(detail);
        self
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        match &e {
            Error::Validation { field, .. } => Self::validation(message).with_detail(json!({ "field": field })),
            Error::InsufficientData { class, .. } => Self::validation(message).with_detail(json!({ "class": class })),
            Error::LabelMismatch { class } => Self::validation(message).with_detail(json!({ "class": class })),
            Error::Parse { offset, .. } => Self::validation(message).with_detail(json!({ "offset": offset })),
            Error::DimensionMismatch { expected, actual } => {
                Self::validation(message).with_detail(json!({ "expected": expected, "actual": actual }))
            }
            Error::Domain(_) | Error::Json(_) => Self::validation(message),
            Error::UnknownJob(_) => Self::not_found(message),
            Error::Conflict(_) => Self::conflict(message),
            Error::Backend { endpoint, status, .. } => {
                Self::new(StatusCode::SERVICE_UNAVAILABLE, ErrorCode::BackendUnavailable, message)
                    .with_detail(json!({ "endpoint": endpoint, "status": status }))
            }
            Error::Persistence { .. } | Error::Divergence { .. } | Error::Cancelled => {
                Self::new(StatusCode::INTERNAL_SERVER_ERROR, ErrorCode::Internal, message)
            }
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub struct AppState {
    pub store: Store,
    pub backends: Backends,
    pub jobs: JobManager,
    pub auth_token: Option<String>,
    pub heartbeat: Duration,
    /// Serialises verdict rewrites per dataset.
    locks: Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>,
}

impl AppState {
    pub fn new(store: Store, backends: Backends, workers: usize, auth_token: Option<String>) -> Self {
        let jobs = JobManager::new(workers, Some(store.events_dir()));
        AppState {
            store,
            backends,
            jobs,
            auth_token,
            heartbeat: DEFAULT_HEARTBEAT,
            locks: Mutex::new(HashMap::new()),
        }
    }

    fn lock_for(&self, id: &str) -> Arc<tokio::sync::Mutex<()>> {
        Arc::clone(self.locks.lock().unwrap().entry(id.to_string()).or_default())
    }
}

type Shared = Arc<AppState>;

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/v1/datasets", post(create_dataset))
        .route("/v1/datasets/{id}", get(get_dataset))
        .route("/v1/datasets/{id}/augment", post(augment_dataset))
        .route("/v1/datasets/{id}/filter/preview", post(preview_filter))
        .route("/v1/datasets/{id}/filter", post(apply_filter))
        .route("/v1/models", post(create_model))
        .route("/v1/models/{id}/metrics", get(model_metrics))
        .route("/v1/models/{id}/predict", post(predict))
        .route("/v1/jobs/{id}", get(job_status))
        .route("/v1/jobs/{id}/cancel", post(cancel_job))
        .route("/v1/jobs/{id}/events", get(job_events))
        .fallback(|| async { ApiError::not_found("no such endpoint") })
        .layer(middleware::from_fn_with_state(Arc::clone(&state), auth))
        .with_state(state)
}

async fn auth(State(state): State<Shared>, request: Request, next: Next) -> Response {
    if let Some(token) = &state.auth_token {
        let presented = request
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if presented != Some(token.as_str()) {
            return ApiError::new(StatusCode::UNAUTHORIZED, ErrorCode::Validation, "missing or invalid bearer token")
                .into_response();
        }
    }
    next.run(request).await
}

/// Strict JSON body parsing: unknown fields and malformed input are 400s.
fn parse_body<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    let body: &[u8] = if body.iter().all(u8::is_ascii_whitespace) { b"{}" } else { body };
    serde_json::from_slice(body).map_err(|e| ApiError::validation(format!("invalid request body: {e}")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, ErrorCode::Internal, e.to_string()))?
}

fn accepted(body: Value) -> Response {
    (StatusCode::ACCEPTED, Json(body)).into_response()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateDataset {
    grammar: ContextGrammar,
    #[serde(default)]
    config: PipelineConfig,
}

async fn create_dataset(State(state): State<Shared>, body: Bytes) -> ApiResult<Response> {
    let req: CreateDataset = parse_body(&body)?;
    req.grammar.validate()?;
    req.config.validate(&state.backends)?;
    let dataset_id = gen_dataset_id(&req.grammar, &req.config, &state.backends)?;
    if state.jobs.is_busy(&dataset_id) {
        return Err(ApiError::conflict(format!("dataset `{dataset_id}` is already being generated")));
    }
    let out = state.store.dataset_dir(&dataset_id)?;
    let backends = state.backends.clone();
    let job_id = state.jobs.submit_for(
        JobKind::AirGen,
        Some(dataset_id.clone()),
        Box::new(move |job: &JobContext| {
            ops::generate(&req.grammar, &req.config, &backends, job, Some(job.cancel_flag()), &out)
        }),
    )?;
    Ok(accepted(json!({ "dataset_id": dataset_id, "job_id": job_id })))
}

fn existing_dataset(state: &AppState, id: &str) -> ApiResult<std::path::PathBuf> {
    let dir = state.store.dataset_dir(id)?;
    if !ops::dataset_exists(&dir) {
        if state.jobs.is_busy(id) {
            return Err(ApiError::conflict(format!("dataset `{id}` is still being generated")));
        }
        return Err(ApiError::not_found(format!("unknown dataset `{id}`")));
    }
    Ok(dir)
}

async fn get_dataset(State(state): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<DatasetSummary>> {
    let dir = existing_dataset(&state, &id)?;
    let summary = blocking(move || Ok(DatasetSummary::of(&load_dataset(&dir)?))).await?;
    Ok(Json(summary))
}

async fn augment_dataset(State(state): State<Shared>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let config: PipelineConfig = parse_body(&body)?;
    let source_dir = existing_dataset(&state, &id)?;
    config.validate(&state.backends)?;
    let src = source_dir.clone();
    let source = blocking(move || Ok(load_dataset(&src)?)).await?;
    let dataset_id = aug_dataset_id(&source, &config, &state.backends)?;
    if state.jobs.is_busy(&dataset_id) {
        return Err(ApiError::conflict(format!("dataset `{dataset_id}` is already being generated")));
    }
    let out = state.store.dataset_dir(&dataset_id)?;
    let backends = state.backends.clone();
    let job_id = state.jobs.submit_for(
        JobKind::AirAug,
        Some(dataset_id.clone()),
        Box::new(move |job: &JobContext| {
            ops::augment(&source_dir, &config, &backends, job, Some(job.cancel_flag()), &out)
        }),
    )?;
    Ok(accepted(json!({ "dataset_id": dataset_id, "job_id": job_id })))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FilterQuery {
    alpha: Option<f64>,
    beta: Option<f64>,
    retention: Option<f64>,
    global: Option<bool>,
}

impl FilterQuery {
    fn params(self) -> FilterParams {
        let d = FilterParams::default();
        FilterParams {
            beta: self.beta.unwrap_or(d.beta),
            retention_target: self.retention.unwrap_or(d.retention_target),
            alpha: self.alpha,
            per_class: !self.global.unwrap_or(false),
            search_iterations: d.search_iterations,
        }
    }
}

fn filter_params(query: Result<Query<FilterQuery>, QueryRejection>) -> ApiResult<FilterParams> {
    let Query(q) = query.map_err(|e| ApiError::validation(format!("invalid query: {}", e.body_text())))?;
    let params = q.params();
    params.validate()?;
    Ok(params)
}

async fn preview_filter(
    State(state): State<Shared>,
    Path(id): Path<String>,
    query: Result<Query<FilterQuery>, QueryRejection>,
) -> ApiResult<Json<Value>> {
    let params = filter_params(query)?;
    let dir = existing_dataset(&state, &id)?;
    let report = blocking(move || Ok(ops::filter_dir(&dir, &params, false)?)).await?;
    Ok(Json(serde_json::to_value(report).map_err(Error::from)?))
}

async fn apply_filter(
    State(state): State<Shared>,
    Path(id): Path<String>,
    query: Result<Query<FilterQuery>, QueryRejection>,
) -> ApiResult<Json<Value>> {
    let params = filter_params(query)?;
    if state.jobs.is_busy(&id) {
        return Err(ApiError::conflict(format!("dataset `{id}` has an active generation job")));
    }
    let dir = existing_dataset(&state, &id)?;
    let lock = state.lock_for(&id);
    let _guard = lock.lock().await;
    let report = blocking(move || Ok(ops::filter_dir(&dir, &params, true)?)).await?;
    Ok(Json(serde_json::to_value(report).map_err(Error::from)?))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MergeSpec {
    augmented_id: String,
    fraction: MergeFraction,
}

/// `TrainConfig` fields plus `dataset_id`, optional `merge`, optional `folds`.
fn parse_train_body(body: &Bytes) -> ApiResult<(String, Option<MergeSpec>, TrainRequest)> {
    let mut obj: serde_json::Map<String, Value> = parse_body(body)?;
    let dataset_id = match obj.remove("dataset_id") {
        Some(Value::String(s)) => s,
        _ => return Err(ApiError::validation("`dataset_id` (string) is required")),
    };
    let merge: Option<MergeSpec> = match obj.remove("merge") {
        None | Some(Value::Null) => None,
        Some(v) => Some(serde_json::from_value(v).map_err(|e| ApiError::validation(format!("invalid `merge`: {e}")))?),
    };
    let folds = match obj.remove("folds") {
        None | Some(Value::Null) => None,
        Some(v) => Some(
            v.as_u64()
                .filter(|&k| k >= 2)
                .ok_or_else(|| ApiError::validation("`folds` must be an integer ≥ 2"))? as usize,
        ),
    };
    let config: TrainConfig = serde_json::from_value(Value::Object(obj))
        .map_err(|e| ApiError::validation(format!("invalid request body: {e}")))?;
    config.validate()?;
    let request = TrainRequest {
        config,
        folds,
        merge_fraction: merge.as_ref().map(|m| m.fraction),
    };
    Ok((dataset_id, merge, request))
}

async fn create_model(State(state): State<Shared>, body: Bytes) -> ApiResult<Response> {
    let (dataset_id, merge, request) = parse_train_body(&body)?;
    let dataset_dir = existing_dataset(&state, &dataset_id)?;
    let aug_dir = match &merge {
        Some(m) => Some(existing_dataset(&state, &m.augmented_id)?),
        None => None,
    };
    let (d, a) = (dataset_dir.clone(), aug_dir.clone());
    let (dataset, augmented) = blocking(move || Ok((load_dataset(&d)?, a.as_deref().map(load_dataset).transpose()?))).await?;
    let model_id = ops::model_id(&dataset, augmented.as_ref(), &request)?;
    if state.jobs.is_busy(&model_id) {
        return Err(ApiError::conflict(format!("model `{model_id}` is already being trained")));
    }
    let out = state.store.model_dir(&model_id)?;
    let kind = if request.folds.is_some() { JobKind::CrossValidate } else { JobKind::Train };
    let job_id = state.jobs.submit_for(
        kind,
        Some(model_id.clone()),
        Box::new(move |job: &JobContext| {
            job.set_train_total(ops::train_epochs(&request));
            let result = ops::train(&dataset_dir, aug_dir.as_deref(), &request, job, &out)?;
            Ok(json!({ "model_id": result["model_id"], "accuracy": result["accuracy"] }))
        }),
    )?;
    Ok(accepted(json!({ "model_id": model_id, "job_id": job_id })))
}

fn existing_model(state: &AppState, id: &str) -> ApiResult<std::path::PathBuf> {
    let dir = state.store.model_dir(id)?;
    if !dir.join(METRICS_FILE).exists() {
        if state.jobs.is_busy(id) {
            return Err(ApiError::conflict(format!("model `{id}` is still training")));
        }
        return Err(ApiError::not_found(format!("unknown model `{id}`")));
    }
    Ok(dir)
}

async fn model_metrics(State(state): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let dir = existing_model(&state, &id)?;
    let path = dir.join(METRICS_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Persistence { path, source: e })?;
    Ok(Json(serde_json::from_str(&text).map_err(Error::from)?))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictBody {
    image_b64: Option<String>,
    embedding: Option<Vec<f64>>,
}

async fn predict(State(state): State<Shared>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<ops::PredictionOutput>> {
    let req: PredictBody = parse_body(&body)?;
    let dir = existing_model(&state, &id)?;
    let backends = state.backends.clone();
    let out = blocking(move || {
        let model = ops::load_model(&dir)?;
        match (req.image_b64, req.embedding) {
            (Some(b64), None) => {
                let bytes = B64
                    .decode(b64.trim())
                    .map_err(|e| ApiError::validation(format!("`image_b64` is not valid base64: {e}")))?;
                Ok(ops::predict_image(&model, &backends, &bytes)?)
            }
            (None, Some(e)) => Ok(ops::predict_embedding(&model, &e)?),
            _ => Err(ApiError::validation("provide exactly one of `image_b64` or `embedding`")),
        }
    })
    .await?;
    Ok(Json(out))
}

async fn job_status(State(state): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let s = state.jobs.status(&id)?;
    Ok(Json(serde_json::to_value(s).map_err(Error::from)?))
}

async fn cancel_job(State(state): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let s = state.jobs.cancel(&id)?;
    Ok(Json(serde_json::to_value(s).map_err(Error::from)?))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct EventsQuery {
    from: Option<usize>,
}

/// Line-delimited JSON events; a `{"heartbeat": ...}` line is sent whenever
/// no event arrived for the heartbeat interval. The stream ends after the
/// terminal event.
async fn job_events(
    State(state): State<Shared>,
    Path(id): Path<String>,
    query: Result<Query<EventsQuery>, QueryRejection>,
) -> ApiResult<Response> {
    let Query(q) = query.map_err(|e| ApiError::validation(format!("invalid query: {}", e.body_text())))?;
    state.jobs.status(&id)?;
    let from = q.from.unwrap_or(0);
    let stream = futures::stream::unfold(Some(from), move |cursor| {
        let state = Arc::clone(&state);
        let id = id.clone();
        async move {
            let from = cursor?;
            let jobs = state.jobs.clone();
            let wait = state.heartbeat;
            let (events, done) = tokio::task::spawn_blocking(move || jobs.wait_events(&id, from, wait))
                .await
                .ok()?
                .ok()?;
            let mut chunk = String::new();
            if events.is_empty() && !done {
                chunk.push_str(&json!({ "heartbeat": chrono::Utc::now() }).to_string());
                chunk.push('\n');
            }
            for e in &events {
                chunk.push_str(&serde_json::to_string(e).ok()?);
                chunk.push('\n');
            }
            let next = if done { None } else { Some(from + events.len()) };
            Some((Ok::<_, Infallible>(Bytes::from(chunk)), next))
        }
    });
    Ok(Response::builder()
        .header(header::CONTENT_TYPE, "application/x-ndjson")
        .body(Body::from_stream(stream))
        .expect("static response parts"))
}

/// Serves the API until ctrl-c.
pub async fn serve(state: AppState, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(state)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
