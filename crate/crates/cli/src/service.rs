//! Stateless HTTP routing service over a frozen engine.

use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use proteus_core::{Engine, QueryInput};
use serde::Serialize;
use serde_json::{json, Value};

use crate::latency::{LatencyHistogram, LatencySummary};

pub const TAU_HEADER: &str = "x-accuracy-target";
pub const ADDR_ENV: &str = "PROTEUS_ADDR";
pub const DEFAULT_ADDR: &str = "127.0.0.1:8080";

#[derive(Clone)]
pub struct AppState {
    engine: Option<Arc<Engine>>,
    latency: Arc<LatencyHistogram>,
}

impl AppState {
    pub fn new(engine: Option<Engine>) -> Self {
        Self {
            engine: engine.map(Arc::new),
            latency: Arc::new(LatencyHistogram::default()),
        }
    }

    pub fn latency(&self) -> LatencySummary {
        self.latency.summary()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RouteResponse {
    pub model: String,
    pub model_index: usize,
    pub mu: f64,
    pub tau: f64,
    pub clamped: bool,
    pub predicted_accuracy: f64,
    pub scores: Vec<f64>,
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/route", post(route))
        .route("/healthz", get(healthz))
        .route("/stats", get(stats))
        .with_state(state)
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

struct BadRequest(String);

fn parse_tau(body: &serde_json::Map<String, Value>, headers: &HeaderMap) -> Result<f64, BadRequest> {
    if let Some(v) = body.get("tau") {
        return v
            .as_f64()
            .ok_or_else(|| BadRequest("field tau must be a number".into()));
    }
    match headers.get(TAU_HEADER) {
        Some(h) => h
            .to_str()
            .ok()
            .and_then(|s| s.trim().parse::<f64>().ok())
            .ok_or_else(|| BadRequest(format!("header {TAU_HEADER} must be a number"))),
        None => Err(BadRequest("missing field: tau".into())),
    }
}

fn parse_input(body: &serde_json::Map<String, Value>) -> Result<QueryInput, BadRequest> {
    if let Some(v) = body.get("text") {
        return v
            .as_str()
            .map(|s| QueryInput::Text(s.to_string()))
            .ok_or_else(|| BadRequest("field text must be a string".into()));
    }
    if let Some(v) = body.get("embedding") {
        let z: Option<Vec<f64>> = v.as_array().and_then(|a| a.iter().map(Value::as_f64).collect());
        return z
            .map(QueryInput::Embedding)
            .ok_or_else(|| BadRequest("field embedding must be an array of numbers".into()));
    }
    if let Some(v) = body.get("embedding_index") {
        return v
            .as_u64()
            .map(|i| QueryInput::Index(i as usize))
            .ok_or_else(|| BadRequest("field embedding_index must be a non-negative integer".into()));
    }
    Err(BadRequest("missing field: text (or embedding, embedding_index)".into()))
}

fn decide(engine: &Engine, headers: &HeaderMap, body: &[u8]) -> Result<RouteResponse, Response> {
    let value: Value =
        serde_json::from_slice(body).map_err(|e| error(StatusCode::BAD_REQUEST, format!("invalid JSON body: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| error(StatusCode::BAD_REQUEST, "body must be a JSON object"))?;
    let tau = parse_tau(obj, headers).map_err(|BadRequest(m)| error(StatusCode::BAD_REQUEST, m))?;
    let input = parse_input(obj).map_err(|BadRequest(m)| error(StatusCode::BAD_REQUEST, m))?;
    let d = engine.route(&input, tau).map_err(|e| {
        let status = match e {
            proteus_core::Error::Lookup(_) | proteus_core::Error::Shape { .. } => StatusCode::BAD_REQUEST,
            ref other if other.is_validation() => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        error(status, e.to_string())
    })?;
    Ok(RouteResponse {
        model: d.model_name,
        model_index: d.model_index,
        mu: d.mu,
        tau: d.tau,
        clamped: d.tau_clamped,
        predicted_accuracy: d.p_hat[d.model_index],
        scores: d.scores,
    })
}

async fn route(State(state): State<AppState>, headers: HeaderMap, body: Bytes) -> Response {
    let Some(engine) = state.engine.clone() else {
        return error(StatusCode::SERVICE_UNAVAILABLE, "engine not loaded");
    };
    let start = Instant::now();
    match decide(&engine, &headers, &body) {
        Ok(r) => {
            state.latency.record(start.elapsed());
            Json(r).into_response()
        }
        Err(resp) => {
            state.latency.record_error();
            resp
        }
    }
}

async fn healthz(State(state): State<AppState>) -> Response {
    match &state.engine {
        Some(e) => Json(json!({ "status": "ok", "k_models": e.pool().len() })).into_response(),
        None => error(StatusCode::SERVICE_UNAVAILABLE, "engine not loaded"),
    }
}

async fn stats(State(state): State<AppState>) -> Response {
    Json(state.latency()).into_response()
}

/// Bind address: explicit value, then `PROTEUS_ADDR`, then the default.
pub fn resolve_addr(explicit: Option<&str>) -> String {
    explicit
        .map(str::to_string)
        .or_else(|| std::env::var(ADDR_ENV).ok().filter(|s| !s.is_empty()))
        .unwrap_or_else(|| DEFAULT_ADDR.to_string())
}

pub async fn serve(engine: Engine, addr: &str) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, k = engine.pool().len(), "serving");
    axum::serve(listener, router(AppState::new(Some(engine))))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
