//! HTTP API over a [`ReviewStore`].
//!
//! | method | path | body / reply |
//! |---|---|---|
//! | GET | `/queues` | open counts per stage: `pair_check`, `refine`, `assess`, `compress` |
//! | GET | `/queues/{stage}/next` | oldest open [`ReviewItem`], or 204 when empty |
//! | GET | `/items/{id}` | [`ReviewItem`] |
//! | POST | `/items/{id}/decision` | [`DecisionRequest`] in, decided [`ReviewItem`] out |
//! | GET | `/assets/{image_id}` | `{"id", "uri"}`; http(s) uris redirect instead |
//! | POST | `/tokenize` | `{"text"}` in, `{"count", "limit"}` out |
//!
//! Errors are `{"error": kind, "message": text}` with 404 (unknown item or
//! stage), 409 (already decided), 422 (verdict, edit or token-limit rule) or
//! 500. The reviewer id comes from the `x-reviewer-id` header, falling back
//! to the body's `reviewer` field and then `anonymous`. When a bearer token
//! is configured every request must carry `Authorization: Bearer <token>`.

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Redirect, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;

use crate::types::{Decision, DecisionRequest, ReviewItem, Stage};
use crate::{ReviewError, ReviewStore};

pub const REVIEWER_HEADER: &str = "x-reviewer-id";

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<ReviewStore>,
    pub auth_token: Option<String>,
}

struct ApiError(StatusCode, String, String);

impl From<ReviewError> for ApiError {
    fn from(e: ReviewError) -> Self {
        let status = match &e {
            ReviewError::NotFound(_) => StatusCode::NOT_FOUND,
            ReviewError::AlreadyDecided(_) | ReviewError::Duplicate { .. } => StatusCode::CONFLICT,
            ReviewError::InvalidVerdict { .. }
            | ReviewError::MissingEdit
            | ReviewError::UnexpectedEdit
            | ReviewError::TokenLimit { .. }
            | ReviewError::InvalidPayload { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            ReviewError::Corrupt { .. } | ReviewError::Io(_) | ReviewError::Json(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.kind().to_string(), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({"error": self.1, "message": self.2}))).into_response()
    }
}

fn not_found(what: String) -> ApiError {
    ApiError(StatusCode::NOT_FOUND, "not_found".into(), what)
}

async fn queues(State(s): State<AppState>) -> Json<serde_json::Value> {
    let counts = s.store.open_counts();
    Json(json!(counts.into_iter().map(|(k, v)| (k.as_str(), v)).collect::<std::collections::BTreeMap<_, _>>()))
}

async fn next_item(State(s): State<AppState>, Path(stage): Path<String>) -> Result<Response, ApiError> {
    let stage = Stage::parse(&stage).ok_or_else(|| not_found(format!("unknown stage {stage:?}")))?;
    Ok(match s.store.next(stage) {
        Some(item) => Json(item).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

async fn get_item(State(s): State<AppState>, Path(id): Path<String>) -> Result<Json<ReviewItem>, ApiError> {
    s.store.get(&id).map(Json).ok_or_else(|| not_found(format!("no review item {id:?}")))
}

async fn decide(
    State(s): State<AppState>,
    Path(id): Path<String>,
    headers: HeaderMap,
    Json(req): Json<DecisionRequest>,
) -> Result<Json<ReviewItem>, ApiError> {
    let reviewer = headers
        .get(REVIEWER_HEADER)
        .and_then(|v| v.to_str().ok())
        .map(str::to_string)
        .or(req.reviewer)
        .unwrap_or_else(|| "anonymous".into());
    let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let item = s.store.decide(Decision {
        item_id: id,
        verdict: req.verdict,
        edited_text: req.edited_text,
        reviewer,
        timestamp,
    })?;
    Ok(Json(item))
}

async fn asset(State(s): State<AppState>, Path(image_id): Path<String>) -> Result<Response, ApiError> {
    let uri = s.store.items().into_iter().find_map(|i| {
        let p = i.payload;
        if p.reference_id == image_id {
            Some(p.reference_uri)
        } else if p.target_id == image_id {
            Some(p.target_uri)
        } else {
            None
        }
    });
    let uri = uri.ok_or_else(|| not_found(format!("no image {image_id:?} in any review item")))?;
    if uri.starts_with("http://") || uri.starts_with("https://") {
        return Ok(Redirect::temporary(&uri).into_response());
    }
    Ok(Json(json!({"id": image_id, "uri": uri})).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TokenizeRequest {
    text: String,
}

async fn tokenize(State(s): State<AppState>, Json(req): Json<TokenizeRequest>) -> Json<serde_json::Value> {
    Json(json!({"count": s.store.token_count(&req.text), "limit": s.store.config().token_limit}))
}

async fn require_token(State(s): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(token) = &s.auth_token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == token);
        if !ok {
            return ApiError(StatusCode::UNAUTHORIZED, "unauthorized".into(), "missing or wrong bearer token".into())
                .into_response();
        }
    }
    next.run(req).await
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/queues", get(queues))
        .route("/queues/{stage}/next", get(next_item))
        .route("/items/{id}", get(get_item))
        .route("/items/{id}/decision", post(decide))
        .route("/assets/{image_id}", get(asset))
        .route("/tokenize", post(tokenize))
        .layer(middleware::from_fn_with_state(state.clone(), require_token))
        .with_state(state)
}

/// Serves until the process is stopped.
pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await
}
