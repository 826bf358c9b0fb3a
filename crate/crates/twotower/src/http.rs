//! JSON over HTTP.
//!
//! Errors are `{"error": <code>, "detail": <message>}` with 404 for unknown
//! products, 422 for invalid parameters and 503 when nothing suitable is loaded.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use twotower_core::ann::Probe;
use twotower_core::serving::{HistoryEvent, Recommendation, RecommendedItem, ServeError, Snapshot, Status, UserHistory};

use crate::state::ServingState;

pub const DEFAULT_K: usize = 10;

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub detail: String,
}

pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, error: &str, detail: impl Into<String>) -> Self {
        ApiError { status, body: ErrorBody { error: error.into(), detail: detail.into() } }
    }

    fn invalid(detail: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_parameters", detail)
    }

    fn not_loaded() -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "not_loaded", "no model and index are loaded")
    }
}

impl From<ServeError> for ApiError {
    fn from(e: ServeError) -> Self {
        let detail = e.to_string();
        match e {
            ServeError::UnknownProduct(_) => Self::new(StatusCode::NOT_FOUND, "unknown_product", detail),
            ServeError::InvalidParameters(_) => Self::invalid(detail),
            ServeError::Unsupported(_) => Self::new(StatusCode::SERVICE_UNAVAILABLE, "not_loaded", detail),
            ServeError::Encode(_) | ServeError::Index(_) => {
                Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", detail)
            }
        }
    }
}

impl From<QueryRejection> for ApiError {
    fn from(e: QueryRejection) -> Self {
        Self::invalid(e.body_text())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::invalid(e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RecommendationBody {
    pub items: Vec<RecommendedItem>,
    pub status: Status,
    pub snapshot_version: u64,
    pub model_version: String,
    pub index_version: String,
    pub took_ms: f64,
}

impl RecommendationBody {
    fn new(r: Recommendation, started: Instant) -> Self {
        RecommendationBody {
            items: r.items,
            status: r.status,
            snapshot_version: r.snapshot_version,
            model_version: r.model_version,
            index_version: r.index_version,
            took_ms: started.elapsed().as_secs_f64() * 1e3,
        }
    }
}

#[derive(Debug, Deserialize)]
pub struct ItemQuery {
    pub k: Option<usize>,
    /// Complementary only: restrict each group to its target category.
    pub filter: Option<bool>,
}

#[derive(Debug, Deserialize)]
pub struct InspireRequest {
    pub history: Vec<HistoryEvent>,
    pub k: Option<usize>,
    pub probe_n: Option<usize>,
    pub skip_l: Option<usize>,
    /// Seconds since the epoch; defaults to the server clock.
    pub now: Option<u64>,
}

#[derive(Debug, Deserialize)]
pub struct ReloadRequest {
    pub checkpoint: PathBuf,
    pub index: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct HealthBody {
    pub status: String,
    pub mode: String,
    pub snapshot_version: u64,
    pub model_version: Option<String>,
    pub index_version: Option<String>,
}

type AppState = Arc<ServingState>;

fn snapshot(state: &ServingState) -> Result<Arc<Snapshot>, ApiError> {
    state.current().ok_or_else(ApiError::not_loaded)
}

async fn similar(
    State(state): State<AppState>,
    Path(id): Path<String>,
    query: Result<Query<ItemQuery>, QueryRejection>,
) -> Result<Json<RecommendationBody>, ApiError> {
    let started = Instant::now();
    let Query(q) = query?;
    let snap = snapshot(&state)?;
    let r = snap.recommend_similar(&id, q.k.unwrap_or(DEFAULT_K))?;
    Ok(Json(RecommendationBody::new(r, started)))
}

async fn complementary(
    State(state): State<AppState>,
    Path(id): Path<String>,
    query: Result<Query<ItemQuery>, QueryRejection>,
) -> Result<Json<RecommendationBody>, ApiError> {
    let started = Instant::now();
    let Query(q) = query?;
    let snap = snapshot(&state)?;
    let r = snap.recommend_complementary(&id, q.k.unwrap_or(DEFAULT_K), q.filter.unwrap_or(true))?;
    Ok(Json(RecommendationBody::new(r, started)))
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

async fn inspire(
    State(state): State<AppState>,
    body: Result<Json<InspireRequest>, JsonRejection>,
) -> Result<Json<RecommendationBody>, ApiError> {
    let started = Instant::now();
    let Json(req) = body?;
    let snap = snapshot(&state)?;
    let history = UserHistory::new(req.history)?;
    let skip_l = req.skip_l.unwrap_or(0);
    // An omitted probe_n falls back to the deployment default, capped to what the index allows.
    let probe_n = req.probe_n.unwrap_or_else(|| {
        let clusters = snap.index().as_hierarchical().map_or(usize::MAX, |h| h.k());
        snap.probe().probe_n.min(clusters.saturating_sub(skip_l)).max(1)
    });
    let probe = Probe { probe_n, skip_l };
    let r = snap.recommend_inspirational(&history, req.now.unwrap_or_else(unix_now), probe, req.k.unwrap_or(DEFAULT_K))?;
    Ok(Json(RecommendationBody::new(r, started)))
}

async fn reload(
    State(state): State<AppState>,
    body: Result<Json<ReloadRequest>, JsonRejection>,
) -> Result<Json<HealthBody>, ApiError> {
    let Json(req) = body?;
    let worker = state.clone();
    let result = tokio::task::spawn_blocking(move || worker.reload(&req.checkpoint, &req.index))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?;
    match result {
        Ok(_) => Ok(Json(health_body(&state))),
        Err(e) => {
            log::warn!("reload failed, keeping version {}: {e}", state.version());
            Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "reload_failed", e.to_string()))
        }
    }
}

fn health_body(state: &ServingState) -> HealthBody {
    let snap = state.current();
    HealthBody {
        status: if snap.is_some() { "ok" } else { "not_loaded" }.into(),
        mode: serde_json::to_value(state.mode()).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
        snapshot_version: snap.as_ref().map_or(0, |s| s.version()),
        model_version: snap.as_ref().map(|s| s.model_version().into()),
        index_version: snap.as_ref().map(|s| s.index_version().into()),
    }
}

async fn healthz(State(state): State<AppState>) -> (StatusCode, Json<HealthBody>) {
    let body = health_body(&state);
    let code = if body.snapshot_version == 0 { StatusCode::SERVICE_UNAVAILABLE } else { StatusCode::OK };
    (code, Json(body))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/similar/{product_id}", get(similar))
        .route("/v1/complementary/{product_id}", get(complementary))
        .route("/v1/inspire", post(inspire))
        .route("/v1/admin/reload", post(reload))
        .route("/v1/healthz", get(healthz))
        .with_state(state)
}

pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
