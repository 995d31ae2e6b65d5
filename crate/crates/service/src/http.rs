use std::sync::Arc;

use axum::extract::{Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use lara_core::trec_io::PairKey;
use serde::Deserialize;
use serde_json::json;

use crate::manager::{CreateSession, Manager, ServiceError};

#[derive(Clone)]
pub struct AppState {
    pub manager: Arc<Manager>,
    /// Shared bearer token; `None` disables the check.
    pub token: Option<String>,
}

fn status_of(e: &ServiceError) -> StatusCode {
    match e {
        ServiceError::SessionNotFound(_) | ServiceError::UnknownCollection(_) => StatusCode::NOT_FOUND,
        ServiceError::InvalidConfig(_) | ServiceError::UnknownAssessor(_) => StatusCode::BAD_REQUEST,
        ServiceError::GradeOutOfRange { .. } | ServiceError::UnknownPair { .. } => StatusCode::UNPROCESSABLE_ENTITY,
        ServiceError::SessionExists(_)
        | ServiceError::GroupBudgetExhausted { .. }
        | ServiceError::AwaitingGroup { .. }
        | ServiceError::AssignmentHeld { .. }
        | ServiceError::Exhausted
        | ServiceError::NoPendingAssignment
        | ServiceError::StaleAssignment
        | ServiceError::SessionNotFinalizable
        | ServiceError::NotFinalized => StatusCode::CONFLICT,
        ServiceError::Recovery { .. } | ServiceError::Io(_) | ServiceError::Trec(_) | ServiceError::Strategy(_) => {
            StatusCode::INTERNAL_SERVER_ERROR
        }
    }
}

pub struct ApiError(ServiceError);

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        Self(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = Json(json!({ "error": self.0.code(), "message": self.0.to_string() }));
        (status_of(&self.0), body).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Io(std::io::Error::other(e.to_string())))?
        .map_err(ApiError)
}

async fn auth(State(state): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(token) = &state.token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == token);
        if !ok {
            let body = Json(json!({ "error": "Unauthorized", "message": "missing or wrong bearer token" }));
            return (StatusCode::UNAUTHORIZED, body).into_response();
        }
    }
    next.run(req).await
}

async fn create(State(s): State<AppState>, Json(req): Json<CreateSession>) -> ApiResult<impl IntoResponse> {
    let view = blocking(move || s.manager.create_session(req)).await?;
    Ok((StatusCode::CREATED, Json(view)))
}

async fn list(State(s): State<AppState>) -> impl IntoResponse {
    Json(json!({ "sessions": s.manager.session_ids(), "collections": s.manager.collection_names() }))
}

async fn show(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json((*s.manager.view(&id)?).clone()))
}

#[derive(Deserialize)]
struct NextQuery {
    assessor: String,
}

async fn next(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<NextQuery>,
) -> ApiResult<impl IntoResponse> {
    Ok(Json(blocking(move || s.manager.next_item(&id, &q.assessor)).await?))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Judgment {
    assessor: String,
    topic: String,
    doc: String,
    grade: u32,
}

async fn judge(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Json(j): Json<Judgment>,
) -> ApiResult<impl IntoResponse> {
    let key = PairKey::new(j.topic, j.doc);
    Ok(Json(blocking(move || s.manager.submit_judgment(&id, &j.assessor, &key, j.grade)).await?))
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FinalizeBody {
    #[serde(default)]
    force: bool,
}

async fn finalize(
    State(s): State<AppState>,
    Path(id): Path<String>,
    body: Option<Json<FinalizeBody>>,
) -> ApiResult<impl IntoResponse> {
    let force = body.map(|b| b.0.force).unwrap_or_default();
    Ok(Json(blocking(move || s.manager.finalize(&id, force)).await?))
}

async fn export(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let text = s.manager.export(&id)?;
    Ok(([(header::CONTENT_TYPE, "text/plain; charset=utf-8")], text))
}

#[derive(Deserialize)]
struct CurveQuery {
    #[serde(default = "default_points")]
    points: usize,
}

fn default_points() -> usize {
    11
}

async fn calibration(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<CurveQuery>,
) -> ApiResult<impl IntoResponse> {
    Ok(Json(blocking(move || s.manager.calibration(&id, q.points)).await?))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create).get(list))
        .route("/sessions/{id}", get(show))
        .route("/sessions/{id}/next", get(next))
        .route("/sessions/{id}/judgments", post(judge))
        .route("/sessions/{id}/finalize", post(finalize))
        .route("/sessions/{id}/export", get(export))
        .route("/sessions/{id}/calibration", get(calibration))
        .route_layer(middleware::from_fn_with_state(state.clone(), auth))
        .route("/health", get(|| async { "ok" }))
        .with_state(state)
}

/// Serves until the listener fails or ctrl-c arrives.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

/// Builds a runtime and serves on `addr`. Blocks.
pub fn run(addr: &str, state: AppState) -> std::io::Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        eprintln!("listening on {}", listener.local_addr()?);
        serve(listener, state).await
    })
}
