//! Session-based HTTP co-pilot over frozen encoder and policy checkpoints.
//!
//! A client opens a session with triage data, receives ranked next actions,
//! feeds back lab results one group at a time and finally asks for a diagnosis.

mod registry;
mod session;

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Request, State};
use axum::http::{HeaderName, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use edcopilot::domain::DomainError;
use edcopilot::encoder::EncoderError;
use edcopilot::rl::RlError;
use serde::Serialize;

pub use registry::{ModelEntry, ModelInfo, Registry, ENCODER_FILE, MODEL_DIR_ENV, PARETO_FILE, POLICY_FILE};
pub use session::{
    ActionView, AppState, Clock, Created, Diagnosis, ManualClock, RankedAction, ReplayReport, ServiceConfig, Session,
    SessionSnapshot, SessionStatus, Suggestion, SystemClock, TraceStep, Updated,
};

pub const API_VERSION_HEADER: &str = "api-version";
pub const API_VERSION: &str = "1";

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("model: {0}")]
    Model(String),
    #[error("replay: {0}")]
    Replay(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Rl(#[from] RlError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

/// An HTTP error with a JSON body `{"error": .., "fields": [..]}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub error: String,
    pub fields: Vec<FieldError>,
}

impl ApiError {
    fn plain(status: StatusCode, error: impl Into<String>) -> Self {
        ApiError {
            status,
            error: error.into(),
            fields: Vec::new(),
        }
    }

    pub fn not_found(m: impl Into<String>) -> Self {
        Self::plain(StatusCode::NOT_FOUND, m)
    }

    pub fn conflict(m: impl Into<String>) -> Self {
        Self::plain(StatusCode::CONFLICT, m)
    }

    pub fn unavailable(m: impl Into<String>) -> Self {
        Self::plain(StatusCode::SERVICE_UNAVAILABLE, m)
    }

    pub fn unprocessable(fields: Vec<FieldError>) -> Self {
        ApiError {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            error: "invalid request".into(),
            fields,
        }
    }

    pub fn message(&self) -> String {
        let fields: Vec<String> = self.fields.iter().map(|f| format!("{}: {}", f.field, f.message)).collect();
        if fields.is_empty() {
            format!("{} {}", self.status.as_u16(), self.error)
        } else {
            format!("{} {} ({})", self.status.as_u16(), self.error, fields.join("; "))
        }
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        Self::plain(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        #[derive(Serialize)]
        struct Body<'a> {
            error: &'a str,
            fields: &'a [FieldError],
        }
        let body = serde_json::to_string(&Body {
            error: &self.error,
            fields: &self.fields,
        })
        .expect("error body serializes");
        json_response(self.status, body)
    }
}

fn json_response(status: StatusCode, body: String) -> Response {
    (status, [(axum::http::header::CONTENT_TYPE, "application/json")], body).into_response()
}

fn json<T: Serialize>(status: StatusCode, v: &T) -> Response {
    json_response(status, serde_json::to_string(v).expect("response serializes"))
}

type Shared = Arc<AppState>;

/// Runs a session operation off the async executor; encoder passes are CPU-bound.
async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::plain(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

async fn create(State(st): State<Shared>, body: Bytes) -> Result<Response, ApiError> {
    let c = blocking(move || st.create_session(&body)).await?;
    Ok(json(StatusCode::CREATED, &c))
}

async fn results(State(st): State<Shared>, Path(id): Path<String>, body: Bytes) -> Result<Response, ApiError> {
    let u = blocking(move || st.submit_results(&id, &body)).await?;
    Ok(json(StatusCode::OK, &u))
}

async fn diagnose(State(st): State<Shared>, Path(id): Path<String>, body: Bytes) -> Result<Response, ApiError> {
    let d = blocking(move || st.diagnose(&id, &body)).await?;
    Ok(json(StatusCode::OK, &d))
}

async fn snapshot(State(st): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    Ok(json(StatusCode::OK, &st.snapshot(&id)?))
}

async fn models(State(st): State<Shared>) -> Response {
    json(StatusCode::OK, &st.registry.read().listing())
}

async fn pareto(State(st): State<Shared>) -> Result<Response, ApiError> {
    #[derive(Serialize)]
    struct Table<'a> {
        task: &'static str,
        rows: &'a [edcopilot::rl::SweepRow],
    }
    let reg = st.registry.read();
    if reg.is_empty() {
        return Err(ApiError::unavailable("no model loaded"));
    }
    let entries: Vec<Arc<ModelEntry>> = reg.all();
    let tables: Vec<Table> = entries
        .iter()
        .map(|m| Table {
            task: m.task.as_str(),
            rows: &m.pareto,
        })
        .collect();
    Ok(json(StatusCode::OK, &tables))
}

async fn api_version(req: Request, next: Next) -> Response {
    let mut res = next.run(req).await;
    res.headers_mut()
        .insert(HeaderName::from_static(API_VERSION_HEADER), HeaderValue::from_static(API_VERSION));
    res
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create))
        .route("/sessions/{id}", get(snapshot))
        .route("/sessions/{id}/results", post(results))
        .route("/sessions/{id}/diagnose", post(diagnose))
        .route("/models", get(models))
        .route("/metrics/pareto", get(pareto))
        .layer(middleware::from_fn(api_version))
        .with_state(state)
}

/// Serves until ctrl-c.
pub async fn serve(state: Arc<AppState>, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
