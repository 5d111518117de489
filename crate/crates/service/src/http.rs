use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;

use qac_core::corpus::UserId;

use crate::engine::{Engine, RankedCompletion, ServiceError, MAX_TOP_N};

/// Error body: `{"error": <kind>, "detail": <message>}`.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    detail: String,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, detail: impl Into<String>) -> Self {
        Self {
            status,
            kind,
            detail: detail.into(),
        }
    }

    fn bad_request(detail: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", detail)
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        match e {
            ServiceError::UnknownUser(_) => {
                Self::new(StatusCode::NOT_FOUND, "unknown_user", e.to_string())
            }
            ServiceError::BadRequest(_) => Self::bad_request(e.to_string()),
            ServiceError::Core(qac_core::Error::Argument(msg)) => Self::bad_request(msg),
            ServiceError::Core(other) => {
                tracing::error!("request failed: {other}");
                Self::new(
                    StatusCode::INTERNAL_SERVER_ERROR,
                    "internal",
                    other.to_string(),
                )
            }
        }
    }
}

impl From<QueryRejection> for ApiError {
    fn from(e: QueryRejection) -> Self {
        Self::bad_request(e.body_text())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::bad_request(e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(json!({ "error": self.kind, "detail": self.detail })),
        )
            .into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Shared handler state. Without an engine every model endpoint answers 503.
#[derive(Debug, Clone, Default)]
pub struct AppState {
    pub engine: Option<Arc<Engine>>,
}

impl AppState {
    pub fn new(engine: Engine) -> Self {
        Self {
            engine: Some(Arc::new(engine)),
        }
    }

    fn engine(&self) -> ApiResult<Arc<Engine>> {
        self.engine.clone().ok_or_else(|| {
            ApiError::new(
                StatusCode::SERVICE_UNAVAILABLE,
                "no_model",
                "no model is loaded",
            )
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CreatedUser {
    pub user_id: u32,
}

#[derive(Debug, Deserialize)]
pub struct CompleteParams {
    pub user_id: u32,
    pub prefix: String,
    pub top_n: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CompleteResponse {
    pub completions: Vec<RankedCompletion>,
}

#[derive(Debug, Deserialize)]
pub struct SelectBody {
    pub user_id: u32,
    pub query: String,
}

#[derive(Debug, Deserialize)]
pub struct NllParams {
    pub user_id: u32,
    pub query: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct NllResponse {
    pub nll: f64,
}

/// Runs CPU-heavy engine work off the async executor.
async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static,
) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(ApiError::from)
}

async fn health(State(state): State<AppState>) -> Json<serde_json::Value> {
    Json(match &state.engine {
        Some(engine) => json!({
            "status": "ok",
            "model_loaded": true,
            "users": engine.user_count(),
            "adaptations": engine.adaptations(),
        }),
        None => json!({ "status": "ok", "model_loaded": false }),
    })
}

async fn create_user(State(state): State<AppState>) -> ApiResult<(StatusCode, Json<CreatedUser>)> {
    let engine = state.engine()?;
    let id = engine.create_user()?;
    Ok((StatusCode::CREATED, Json(CreatedUser { user_id: id.0 })))
}

async fn complete(
    State(state): State<AppState>,
    params: Result<Query<CompleteParams>, QueryRejection>,
) -> ApiResult<Json<CompleteResponse>> {
    let engine = state.engine()?;
    let Query(p) = params?;
    let top_n = p.top_n.unwrap_or(MAX_TOP_N);
    let completions =
        blocking(move || engine.complete(UserId(p.user_id), &p.prefix, top_n)).await?;
    Ok(Json(CompleteResponse { completions }))
}

async fn select(
    State(state): State<AppState>,
    body: Result<Json<SelectBody>, JsonRejection>,
) -> ApiResult<StatusCode> {
    let engine = state.engine()?;
    let Json(b) = body?;
    blocking(move || engine.select(UserId(b.user_id), &b.query)).await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn nll(
    State(state): State<AppState>,
    params: Result<Query<NllParams>, QueryRejection>,
) -> ApiResult<Json<NllResponse>> {
    let engine = state.engine()?;
    let Query(p) = params?;
    let nll = blocking(move || engine.nll(UserId(p.user_id), &p.query)).await?;
    Ok(Json(NllResponse { nll }))
}

/// The HTTP API; static UI assets are served under `/ui/` when `ui_dir` is given.
pub fn router(state: AppState, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/health", get(health))
        .route("/users", post(create_user))
        .route("/complete", get(complete))
        .route("/select", post(select))
        .route("/nll", get(nll))
        .with_state(state);
    match ui_dir {
        Some(dir) => api.nest_service(
            "/ui",
            ServeDir::new(dir).append_index_html_on_directories(true),
        ),
        None => api,
    }
}

/// Serves `router` on `addr` until ctrl-c.
pub async fn serve(addr: SocketAddr, app: Router) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
