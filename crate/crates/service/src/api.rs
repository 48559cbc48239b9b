//! HTTP routes.

use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Instant;

use axum::body::Body;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use ecohabit_core::domain::{EventRecord, RecommendationStatus, Verdict};
use ecohabit_core::ingest::{parse_line, LogFormat};
use serde::Deserialize;

use crate::error::ServiceError;
use crate::service::Service;
use crate::webhook::Deliveries;

pub struct AppState {
    service: Mutex<Service>,
    token: String,
    deliveries: Option<Deliveries>,
}

impl AppState {
    pub fn new(service: Service, deliveries: Option<Deliveries>) -> Arc<Self> {
        let token = service.config().token.clone();
        Arc::new(Self {
            service: Mutex::new(service),
            token,
            deliveries,
        })
    }

    pub fn lock(&self) -> MutexGuard<'_, Service> {
        self.service.lock().unwrap_or_else(|p| p.into_inner())
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let protected = Router::new()
        .route("/homes/:home_id/events", post(post_events))
        .route("/homes/:home_id/recommendations", get(list_recommendations))
        .route("/recommendations/:id/feedback", post(post_feedback))
        .route("/rules", get(get_rules))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new()
        .route("/health", get(|| async { "ok" }))
        .merge(protected)
        .layer(middleware::from_fn(log_request))
        .with_state(state)
}

async fn require_token(State(state): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    let ok = req
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .is_some_and(|t| t.trim() == state.token);
    if ok {
        next.run(req).await
    } else {
        ServiceError::Unauthorized.into_response()
    }
}

async fn log_request(req: Request<Body>, next: Next) -> Response {
    let method = req.method().clone();
    let path = req.uri().path().to_string();
    let started = Instant::now();
    let resp = next.run(req).await;
    tracing::info!(
        method = %method,
        path = %path,
        status = resp.status().as_u16(),
        micros = started.elapsed().as_micros() as u64,
        "request"
    );
    resp
}

/// Accepts a JSON array of records, or one JSON record per line.
fn parse_events(body: &str) -> Result<Vec<EventRecord>, ServiceError> {
    let trimmed = body.trim();
    if trimmed.is_empty() {
        return Err(ServiceError::BadRequest("empty body".into()));
    }
    let bad = |e: ecohabit_core::ingest::ParseError| ServiceError::BadRequest(format!("record {}: {}", e.line_no, e.reason));
    if trimmed.starts_with('[') {
        let items: Vec<serde_json::Value> =
            serde_json::from_str(trimmed).map_err(|e| ServiceError::BadRequest(format!("malformed json: {e}")))?;
        items
            .iter()
            .enumerate()
            .map(|(i, v)| parse_line(&v.to_string(), i + 1, LogFormat::Jsonl).map_err(bad))
            .collect()
    } else {
        trimmed
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| parse_line(l, i + 1, LogFormat::Jsonl).map_err(bad))
            .collect()
    }
}

async fn post_events(
    State(state): State<Arc<AppState>>,
    Path(home_id): Path<String>,
    body: String,
) -> Result<Response, ServiceError> {
    let events = parse_events(&body)?;
    let (report, outbox) = {
        let mut svc = state.lock();
        let report = svc.post_events(&home_id, events)?;
        (report, svc.take_outbox())
    };
    if let Some(d) = &state.deliveries {
        d.enqueue(outbox);
    }
    Ok((StatusCode::ACCEPTED, Json(report)).into_response())
}

#[derive(Debug, Deserialize)]
struct StatusQuery {
    status: Option<String>,
}

async fn list_recommendations(
    State(state): State<Arc<AppState>>,
    Path(home_id): Path<String>,
    Query(q): Query<StatusQuery>,
) -> Result<Response, ServiceError> {
    let status = q
        .status
        .map(|s| s.parse::<RecommendationStatus>())
        .transpose()
        .map_err(ServiceError::BadRequest)?;
    let list = state.lock().recommendations(&home_id, status)?;
    Ok(Json(list).into_response())
}

/// `{"verdict": "useful"}`, a JSON string, or the bare word.
fn parse_verdict(body: &str) -> Result<Verdict, ServiceError> {
    let raw = match serde_json::from_str::<serde_json::Value>(body.trim()) {
        Ok(serde_json::Value::Object(map)) => match map.get("verdict") {
            Some(serde_json::Value::String(s)) => s.clone(),
            _ => return Err(ServiceError::BadRequest("expected a string field \"verdict\"".into())),
        },
        Ok(serde_json::Value::String(s)) => s,
        Ok(_) => return Err(ServiceError::BadRequest("expected useful or not_useful".into())),
        Err(_) => body.trim().to_string(),
    };
    raw.parse().map_err(ServiceError::BadRequest)
}

async fn post_feedback(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: String,
) -> Result<Response, ServiceError> {
    let verdict = parse_verdict(&body)?;
    let outcome = state.lock().feedback(&id, verdict)?;
    Ok(Json(outcome).into_response())
}

async fn get_rules(State(state): State<Arc<AppState>>) -> Response {
    Json(state.lock().census()).into_response()
}
