//! HTTP routes.

use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use spanwork_core::corpus::Subtask;
use spanwork_core::study::Submission;

use crate::service::{ServiceError, StudyService, TestrunAnswer};

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let (status, code) = match &self {
            ServiceError::Unauthorized => (StatusCode::UNAUTHORIZED, "unauthorized"),
            ServiceError::Forbidden(_) => (StatusCode::FORBIDDEN, "forbidden"),
            ServiceError::NotFound(_) => (StatusCode::NOT_FOUND, "not-found"),
            ServiceError::Conflict(_) => (StatusCode::CONFLICT, "conflict"),
            ServiceError::BadRequest(_) => (StatusCode::BAD_REQUEST, "bad-request"),
            ServiceError::Store(_) | ServiceError::Report(_) => {
                tracing::error!(error = %self, "request failed");
                (StatusCode::INTERNAL_SERVER_ERROR, "internal")
            }
        };
        (status, Json(json!({ "error": code, "message": self.to_string() }))).into_response()
    }
}

type AppState = Arc<StudyService>;

/// Service calls block on the writer lock and the log, so they run off the
/// async workers.
async fn blocking<T, F>(service: &AppState, f: F) -> Result<T, ServiceError>
where
    T: Send + 'static,
    F: FnOnce(&StudyService) -> Result<T, ServiceError> + Send + 'static,
{
    let service = service.clone();
    tokio::task::spawn_blocking(move || f(&service))
        .await
        .expect("service call panicked")
}

fn worker_from(service: &StudyService, headers: &HeaderMap) -> Result<String, ServiceError> {
    let token = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .ok_or(ServiceError::Unauthorized)?;
    service.authenticate(token.trim()).ok_or(ServiceError::Unauthorized)
}

#[derive(Deserialize)]
struct RegisterBody {
    approval_rate: f64,
}

async fn register(
    State(service): State<AppState>,
    Json(body): Json<RegisterBody>,
) -> Result<impl IntoResponse, ServiceError> {
    let reg = blocking(&service, move |s| s.register_worker(body.approval_rate)).await?;
    Ok((StatusCode::CREATED, Json(reg)))
}

#[derive(Deserialize)]
struct TestrunBody {
    records: Vec<TestrunAnswer>,
}

async fn testrun(
    State(service): State<AppState>,
    headers: HeaderMap,
    Path(worker_id): Path<String>,
    Json(body): Json<TestrunBody>,
) -> Result<impl IntoResponse, ServiceError> {
    if worker_from(&service, &headers)? != worker_id {
        return Err(ServiceError::Forbidden("token belongs to another worker".into()));
    }
    let result = blocking(&service, move |s| s.testrun(&worker_id, body.records)).await?;
    Ok(Json(result))
}

#[derive(Deserialize)]
struct NextQuery {
    subtask: String,
}

async fn next_hit(
    State(service): State<AppState>,
    headers: HeaderMap,
    Query(q): Query<NextQuery>,
) -> Result<Response, ServiceError> {
    let worker = worker_from(&service, &headers)?;
    let subtask: Subtask = q
        .subtask
        .parse()
        .map_err(|e: spanwork_core::corpus::CorpusError| ServiceError::BadRequest(e.to_string()))?;
    match blocking(&service, move |s| s.next_hit(&worker, subtask)).await? {
        Some(hit) => Ok(Json(hit).into_response()),
        None => Ok(StatusCode::NO_CONTENT.into_response()),
    }
}

async fn submit(
    State(service): State<AppState>,
    headers: HeaderMap,
    Path(hit_id): Path<String>,
    Json(body): Json<Submission>,
) -> Result<impl IntoResponse, ServiceError> {
    let worker = worker_from(&service, &headers)?;
    let receipt = blocking(&service, move |s| s.submit(&worker, &hit_id, body)).await?;
    Ok((StatusCode::CREATED, Json(receipt)))
}

async fn progress(State(service): State<AppState>) -> impl IntoResponse {
    Json(service.progress())
}

async fn report(State(service): State<AppState>) -> Result<impl IntoResponse, ServiceError> {
    Ok(Json(blocking(&service, |s| s.report()).await?))
}

pub fn router(service: AppState) -> Router {
    Router::new()
        .route("/workers", post(register))
        .route("/workers/{id}/testrun", post(testrun))
        .route("/hits/next", get(next_hit))
        .route("/hits/{hit_id}/annotation", post(submit))
        .route("/admin/progress", get(progress))
        .route("/admin/report", get(report))
        .with_state(service)
}

/// Periodically expires stale HITs until the runtime shuts down.
pub fn spawn_expiry(service: AppState, every: Duration) -> tokio::task::JoinHandle<()> {
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(every);
        loop {
            tick.tick().await;
            match blocking(&service, |s| s.expire_stale()).await {
                Ok(0) => {}
                Ok(n) => tracing::info!(expired = n, "expired stale HITs"),
                Err(e) => tracing::error!(error = %e, "expiry failed"),
            }
        }
    })
}
