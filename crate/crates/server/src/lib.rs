//! HTTP/JSON API over a [`ReviewStore`].
//!
//! | method | path | result |
//! |---|---|---|
//! | POST | `/projects` | 201 `{project_id, candidate_count}` |
//! | GET | `/projects` | page of project metadata |
//! | GET | `/projects/{id}` | summary with vetted metrics |
//! | GET | `/projects/{id}/batch?k=20` | page of the top pending review items |
//! | POST | `/projects/{id}/decisions` | 201 decision log entry |
//! | GET | `/projects/{id}/decisions` | page of the decision log |
//! | GET | `/projects/{id}/export` | `text/csv` answer file of approved pairs |
//! | POST | `/projects/{id}/rescore` | 202 `{job_id, status_url}` |
//! | GET | `/jobs/{id}` | rescore job status |
//!
//! Errors are `{"error": "..."}` with 404 for unknown ids, 409 for duplicate
//! projects or an already running rescore, and 422 for invalid input.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::cors::CorsLayer;
use tracekit::corpus::{load_dataset, Dataset, PairId};
use tracekit::exec::Parallelism;
use tracekit::review::{NewProject, ReviewError, ReviewStore, SharedProject, Verdict};
use tracekit::scoring::{score_pairs, ScorerSpec};

pub const DEFAULT_PAGE_LIMIT: usize = 50;
pub const MAX_PAGE_LIMIT: usize = 1000;
pub const DEFAULT_BATCH: usize = 20;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    fn unprocessable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }
}

impl From<ReviewError> for ApiError {
    fn from(e: ReviewError) -> Self {
        let status = match &e {
            ReviewError::NotFound(_) => StatusCode::NOT_FOUND,
            ReviewError::ProjectExists(_) => StatusCode::CONFLICT,
            ReviewError::InvalidId(_)
            | ReviewError::UnknownPair(_)
            | ReviewError::InvalidBatchSize
            | ReviewError::AmbiguousQuery(_)
            | ReviewError::Corpus(_)
            | ReviewError::Text(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ReviewError::Scoring(_) => StatusCode::BAD_GATEWAY,
            ReviewError::Io { .. } | ReviewError::Json { .. } | ReviewError::CorruptLog { .. } => {
                StatusCode::INTERNAL_SERVER_ERROR
            }
        };
        ApiError::new(status, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        let status = match r {
            JsonRejection::JsonDataError(_) => StatusCode::UNPROCESSABLE_ENTITY,
            JsonRejection::MissingJsonContentType(_) => StatusCode::UNSUPPORTED_MEDIA_TYPE,
            _ => StatusCode::BAD_REQUEST,
        };
        ApiError::new(status, r.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(r: QueryRejection) -> Self {
        ApiError::unprocessable(r.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(serde_json::json!({ "error": self.message })),
        )
            .into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Running,
    Succeeded,
    Failed,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    pub project_id: String,
    pub scorer: String,
    pub status: JobStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Default)]
struct Jobs {
    next: AtomicU64,
    table: Mutex<HashMap<String, Job>>,
}

#[derive(Clone)]
pub struct AppState {
    store: Arc<ReviewStore>,
    jobs: Arc<Jobs>,
    mode: Parallelism,
}

impl AppState {
    pub fn new(store: ReviewStore, mode: Parallelism) -> Self {
        AppState {
            store: Arc::new(store),
            jobs: Arc::new(Jobs::default()),
            mode,
        }
    }

    pub fn store(&self) -> &ReviewStore {
        &self.store
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/projects", post(create_project).get(list_projects))
        .route("/projects/{id}", get(project_summary))
        .route("/projects/{id}/batch", get(next_batch))
        .route(
            "/projects/{id}/decisions",
            post(record_decision).get(list_decisions),
        )
        .route("/projects/{id}/export", get(export))
        .route("/projects/{id}/rescore", post(rescore))
        .route("/jobs/{id}", get(job_status))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "no such route") })
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Serves until the listener fails or the future is dropped.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> ApiResult<T> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum ScorerArg {
    Text(String),
    Spec(ScorerSpec),
}

impl ScorerArg {
    fn resolve(self) -> ApiResult<ScorerSpec> {
        match self {
            ScorerArg::Spec(s) => Ok(s),
            ScorerArg::Text(t) => ScorerSpec::parse(&t)
                .ok_or_else(|| ApiError::unprocessable(format!("unknown scorer {t:?}"))),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateProject {
    #[serde(default)]
    pub id: Option<String>,
    #[serde(default)]
    pub dataset_manifest_path: Option<PathBuf>,
    #[serde(default)]
    pub dataset: Option<Dataset>,
    #[serde(default)]
    pub query: Option<String>,
    #[serde(default)]
    pub scorer: Option<ScorerArg>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Created {
    pub project_id: String,
    pub candidate_count: usize,
}

async fn create_project(
    State(state): State<AppState>,
    body: Result<Json<CreateProject>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<Created>)> {
    let Json(req) = body?;
    let scorer = req
        .scorer
        .map_or(Ok(ScorerSpec::vsm()), ScorerArg::resolve)?;
    let dataset = match (req.dataset, req.dataset_manifest_path) {
        (Some(d), None) => d,
        (None, Some(path)) => {
            blocking(move || {
                load_dataset(&path)
                    .map(|(d, _)| d)
                    .map_err(|e| ApiError::unprocessable(e.to_string()))
            })
            .await?
        }
        _ => {
            return Err(ApiError::unprocessable(
                "give exactly one of dataset_manifest_path or dataset",
            ))
        }
    };
    let new = NewProject {
        id: req.id,
        dataset,
        query_id: req.query,
        scorer,
    };
    let created = blocking(move || {
        let project = state.store.create_project(new, state.mode)?;
        let p = project.read().expect("project lock");
        Ok(Created {
            project_id: p.meta().id.clone(),
            candidate_count: p.candidate_count(),
        })
    })
    .await?;
    Ok((StatusCode::CREATED, Json(created)))
}

#[derive(Debug, Default, Deserialize)]
pub struct PageParams {
    pub offset: Option<usize>,
    pub limit: Option<usize>,
}

impl PageParams {
    fn bounds(&self, default_limit: usize) -> ApiResult<(usize, usize)> {
        let limit = self.limit.unwrap_or(default_limit);
        if limit == 0 || limit > MAX_PAGE_LIMIT {
            return Err(ApiError::unprocessable(format!(
                "limit must be in 1..={MAX_PAGE_LIMIT}"
            )));
        }
        Ok((self.offset.unwrap_or(0), limit))
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Page<T> {
    pub items: Vec<T>,
    pub offset: usize,
    pub limit: usize,
    pub total: usize,
}

fn page<T>(all: Vec<T>, offset: usize, limit: usize) -> Page<T> {
    let total = all.len();
    Page {
        items: all.into_iter().skip(offset).take(limit).collect(),
        offset,
        limit,
        total,
    }
}

async fn list_projects(
    State(state): State<AppState>,
    params: Result<Query<PageParams>, QueryRejection>,
) -> ApiResult<Json<Page<tracekit::review::ProjectMeta>>> {
    let Query(params) = params?;
    let (offset, limit) = params.bounds(DEFAULT_PAGE_LIMIT)?;
    let all = blocking(move || Ok(state.store.list()?)).await?;
    Ok(Json(page(all, offset, limit)))
}

async fn with_project<T, F>(state: AppState, id: String, f: F) -> ApiResult<T>
where
    F: FnOnce(SharedProject) -> ApiResult<T> + Send + 'static,
    T: Send + 'static,
{
    blocking(move || f(state.store.project(&id)?)).await
}

async fn project_summary(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<Json<tracekit::review::ProjectSummary>> {
    with_project(state, id, |p| {
        Ok(Json(p.read().expect("project lock").summary()))
    })
    .await
}

#[derive(Debug, Deserialize)]
pub struct BatchParams {
    pub k: Option<usize>,
    pub offset: Option<usize>,
    pub limit: Option<usize>,
}

async fn next_batch(
    State(state): State<AppState>,
    Path(id): Path<String>,
    params: Result<Query<BatchParams>, QueryRejection>,
) -> ApiResult<Json<Page<tracekit::review::ReviewItem>>> {
    let Query(params) = params?;
    let k = params.k.or(params.limit).unwrap_or(DEFAULT_BATCH);
    if k == 0 || k > MAX_PAGE_LIMIT {
        return Err(ApiError::unprocessable(format!(
            "k must be in 1..={MAX_PAGE_LIMIT}"
        )));
    }
    let offset = params.offset.unwrap_or(0);
    with_project(state, id, move |p| {
        let p = p.read().expect("project lock");
        let items = p.next_batch(offset + k)?;
        Ok(Json(Page {
            items: items.into_iter().skip(offset).collect(),
            offset,
            limit: k,
            total: p.vetted_metrics(None).pending,
        }))
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionRequest {
    pub pair_id: PairId,
    pub verdict: Verdict,
    #[serde(default)]
    pub reviewer: String,
}

async fn record_decision(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<DecisionRequest>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<tracekit::review::DecisionLogEntry>)> {
    // Resolve the project first so an unknown id is a 404 even when the body
    // is also invalid.
    let project = {
        let state = state.clone();
        blocking(move || Ok(state.store.project(&id)?)).await?
    };
    let Json(req) = body?;
    let entry = blocking(move || {
        let mut p = project.write().expect("project lock");
        Ok(p.record_decision(&req.pair_id, req.verdict, &req.reviewer)?)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(entry)))
}

async fn list_decisions(
    State(state): State<AppState>,
    Path(id): Path<String>,
    params: Result<Query<PageParams>, QueryRejection>,
) -> ApiResult<Json<Page<tracekit::review::DecisionLogEntry>>> {
    let Query(params) = params?;
    let (offset, limit) = params.bounds(DEFAULT_PAGE_LIMIT)?;
    with_project(state, id, move |p| {
        let log = p.read().expect("project lock").read_log()?;
        Ok(Json(page(log, offset, limit)))
    })
    .await
}

async fn export(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let file_name = format!("attachment; filename=\"{id}-approved.csv\"");
    let csv = with_project(state, id, |p| {
        Ok(p.read().expect("project lock").export_training())
    })
    .await?;
    let mut response = csv.into_response();
    let headers = response.headers_mut();
    headers.insert(
        header::CONTENT_TYPE,
        HeaderValue::from_static("text/csv; charset=utf-8"),
    );
    if let Ok(v) = HeaderValue::from_str(&file_name) {
        headers.insert(header::CONTENT_DISPOSITION, v);
    }
    Ok(response)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RescoreRequest {
    #[serde(default)]
    pub scorer: Option<ScorerArg>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Accepted {
    pub job_id: String,
    pub status_url: String,
}

async fn rescore(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<RescoreRequest>, JsonRejection>,
) -> ApiResult<Response> {
    let project = {
        let state = state.clone();
        let id = id.clone();
        blocking(move || Ok(state.store.project(&id)?)).await?
    };
    let Json(req) = body?;
    let scorer = match req.scorer {
        Some(s) => s.resolve()?,
        None => project.read().expect("project lock").scorer().clone(),
    };

    let job_id = {
        let mut table = state.jobs.table.lock().expect("job table");
        if table
            .values()
            .any(|j| j.project_id == id && j.status == JobStatus::Running)
        {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                format!("a rescore of {id} is already running"),
            ));
        }
        let job_id = format!(
            "job-{}",
            state.jobs.next.fetch_add(1, Ordering::Relaxed) + 1
        );
        table.insert(
            job_id.clone(),
            Job {
                id: job_id.clone(),
                project_id: id.clone(),
                scorer: scorer.name.clone(),
                status: JobStatus::Running,
                error: None,
            },
        );
        job_id
    };

    let jobs = state.jobs.clone();
    let mode = state.mode;
    let job_key = job_id.clone();
    tokio::task::spawn_blocking(move || {
        let result = run_rescore(&project, scorer, mode);
        let mut table = jobs.table.lock().expect("job table");
        if let Some(job) = table.get_mut(&job_key) {
            match result {
                Ok(()) => job.status = JobStatus::Succeeded,
                Err(e) => {
                    job.status = JobStatus::Failed;
                    job.error = Some(e.to_string());
                }
            }
        }
    });

    let status_url = format!("/jobs/{job_id}");
    let mut response = (
        StatusCode::ACCEPTED,
        Json(Accepted {
            job_id,
            status_url: status_url.clone(),
        }),
    )
        .into_response();
    if let Ok(v) = HeaderValue::from_str(&status_url) {
        response.headers_mut().insert(header::LOCATION, v);
    }
    Ok(response)
}

/// Scores outside the project lock so reviewers keep working meanwhile;
/// items decided in the meantime keep their state.
fn run_rescore(
    project: &SharedProject,
    scorer: ScorerSpec,
    mode: Parallelism,
) -> Result<(), ReviewError> {
    let (dataset, query_id, pending) = {
        let p = project.read().expect("project lock");
        (p.dataset().clone(), p.meta().query_id.clone(), p.pending())
    };
    let scored = score_pairs(&scorer, &dataset, &query_id, &pending, mode)?;
    project
        .write()
        .expect("project lock")
        .apply_rescore(scorer, &scored)
}

async fn job_status(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Job>> {
    state
        .jobs
        .table
        .lock()
        .expect("job table")
        .get(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown job: {id}")))
}
