//! JSON over HTTP: POST /query, GET /metrics, GET /health, POST /bench,
//! POST /admin/reload. Every failure is an `{error: {stage, code, message}}`
//! document.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use conductor_core::services::Health;
use serde::{Deserialize, Serialize};

use crate::bench::{run_bench, BenchQuery, Scenario};
use crate::platform::{ErrorBody, ErrorDocument, Platform, QueryReply, QueryRequest};

pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    pub fn new(status: StatusCode, body: ErrorBody) -> Self {
        Self { status, body }
    }

    fn malformed(rejection: JsonRejection) -> Self {
        Self::new(
            StatusCode::BAD_REQUEST,
            ErrorBody::new("request", "malformed-request", rejection.body_text()),
        )
    }
}

impl From<ErrorBody> for ApiError {
    fn from(body: ErrorBody) -> Self {
        let status = match body.stage.as_str() {
            "request" | "context" => StatusCode::BAD_REQUEST,
            "decompose" | "plan" | "rules" | "chain" => StatusCode::UNPROCESSABLE_ENTITY,
            "service" | "retrieval" => StatusCode::BAD_GATEWAY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self { status, body }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorDocument { error: self.body })).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

pub fn router(platform: Arc<Platform>) -> Router {
    Router::new()
        .route("/query", post(query))
        .route("/metrics", get(metrics))
        .route("/health", get(health))
        .route("/bench", post(bench))
        .route("/admin/reload", post(reload))
        .fallback(not_found)
        .method_not_allowed_fallback(method_not_allowed)
        .with_state(platform)
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, ErrorBody::new("request", "not-found", "no such route"))
}

async fn method_not_allowed() -> ApiError {
    ApiError::new(
        StatusCode::METHOD_NOT_ALLOWED,
        ErrorBody::new("request", "method-not-allowed", "method not allowed on this route"),
    )
}

async fn query(
    State(platform): State<Arc<Platform>>,
    body: Result<Json<QueryRequest>, JsonRejection>,
) -> ApiResult<QueryReply> {
    let Json(request) = body.map_err(ApiError::malformed)?;
    let response = platform.handle_query(&request).await?;
    Ok(Json(QueryReply::new(response, request.verbose)))
}

async fn metrics(State(platform): State<Arc<Platform>>) -> Json<crate::platform::MetricsSnapshot> {
    Json(platform.metrics())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HealthReply {
    pub status: String,
    pub version: String,
    pub services: BTreeMap<String, Health>,
}

async fn health(State(platform): State<Arc<Platform>>) -> Json<HealthReply> {
    let services = platform.health().await;
    let status = if services.values().all(Health::is_healthy) { "ok" } else { "degraded" };
    Json(HealthReply {
        status: status.into(),
        version: platform.snapshot().config.version.clone(),
        services,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRequest {
    pub scenario: Scenario,
    #[serde(default = "one")]
    pub repetitions: usize,
    pub queries: Vec<BenchQuery>,
}

fn one() -> usize {
    1
}

async fn bench(
    State(platform): State<Arc<Platform>>,
    body: Result<Json<BenchRequest>, JsonRejection>,
) -> ApiResult<crate::bench::MetricsReport> {
    let Json(request) = body.map_err(ApiError::malformed)?;
    let snapshot = platform.snapshot();
    let report = run_bench(
        &snapshot.orchestrator,
        request.scenario,
        &request.queries,
        request.repetitions,
        snapshot.config.cache_policy,
    )
    .await
    .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, ErrorBody::new("bench", e.code(), e.to_string())))?;
    Ok(Json(report))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReloadRequest {
    #[serde(default)]
    pub path: Option<PathBuf>,
}

async fn reload(
    State(platform): State<Arc<Platform>>,
    body: Result<Json<ReloadRequest>, JsonRejection>,
) -> ApiResult<crate::platform::ReloadSummary> {
    let request = match body {
        Ok(Json(r)) => r,
        // No JSON body means "reload from the current path".
        Err(JsonRejection::MissingJsonContentType(_)) => ReloadRequest::default(),
        Err(e) => return Err(ApiError::malformed(e)),
    };
    let summary = platform
        .reload(request.path.as_deref())
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.into()))?;
    Ok(Json(summary))
}
