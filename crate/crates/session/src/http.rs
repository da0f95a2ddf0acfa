//! Axum routes over the [`Store`].

use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;

use crate::model::{CreateRequest, EditRequest, ErrorBody, EventsPage, SessionView};
use crate::service::{SessionError, Store};

/// Upper bound on any long-poll wait.
pub const MAX_WAIT_MS: u64 = 30_000;

impl SessionError {
    pub fn status(&self) -> StatusCode {
        match self {
            SessionError::UnknownSession(_) => StatusCode::NOT_FOUND,
            SessionError::BadTask(_) => StatusCode::BAD_REQUEST,
            SessionError::NotPaused | SessionError::Conflict(_) => StatusCode::CONFLICT,
            SessionError::NotAThought(_) | SessionError::IndexOutOfRange { .. } | SessionError::Malformed(_) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            SessionError::Unauthorized => StatusCode::UNAUTHORIZED,
            SessionError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for SessionError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.code().to_string(),
            message: self.to_string(),
        };
        (self.status(), Json(body)).into_response()
    }
}

#[derive(Debug, Default, Deserialize)]
struct WaitQuery {
    #[serde(default)]
    from: u64,
    #[serde(default)]
    wait_ms: u64,
}

impl WaitQuery {
    fn wait(&self) -> Duration {
        Duration::from_millis(self.wait_ms.min(MAX_WAIT_MS))
    }
}

pub fn router(store: Store) -> Router {
    Router::new()
        .route("/sessions", post(create))
        .route("/sessions/{id}", get(show))
        .route("/sessions/{id}/events", get(events))
        .route("/sessions/{id}/pause", post(pause))
        .route("/sessions/{id}/resume", post(resume))
        .route("/sessions/{id}/edit", post(edit))
        .layer(middleware::from_fn_with_state(store.clone(), auth))
        .with_state(store)
}

async fn auth(State(store): State<Store>, req: Request, next: Next) -> Response {
    if let Some(token) = &store.config().token {
        let given = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if given != Some(token.as_str()) {
            return SessionError::Unauthorized.into_response();
        }
    }
    next.run(req).await
}

async fn create(State(store): State<Store>, body: Bytes) -> Result<(StatusCode, Json<SessionView>), SessionError> {
    let req: CreateRequest = serde_json::from_slice(&body).map_err(|e| SessionError::BadTask(e.to_string()))?;
    let session = tokio::task::spawn_blocking(move || store.create(req))
        .await
        .map_err(|e| SessionError::Internal(e.to_string()))??;
    Ok((StatusCode::CREATED, Json(session.view())))
}

async fn show(
    State(store): State<Store>,
    Path(id): Path<String>,
    Query(q): Query<WaitQuery>,
) -> Result<Json<SessionView>, SessionError> {
    let s = store.get(&id)?;
    if q.wait_ms > 0 {
        s.settle(q.wait()).await;
    }
    Ok(Json(s.view()))
}

async fn events(
    State(store): State<Store>,
    Path(id): Path<String>,
    Query(q): Query<WaitQuery>,
) -> Result<Json<EventsPage>, SessionError> {
    let s = store.get(&id)?;
    Ok(Json(s.events(q.from, q.wait()).await))
}

async fn pause(State(store): State<Store>, Path(id): Path<String>) -> Result<Json<SessionView>, SessionError> {
    store.pause(&id).map(Json)
}

async fn resume(State(store): State<Store>, Path(id): Path<String>) -> Result<Json<SessionView>, SessionError> {
    store.resume(&id).map(Json)
}

async fn edit(
    State(store): State<Store>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<SessionView>, SessionError> {
    let req: EditRequest = serde_json::from_slice(&body).map_err(|e| SessionError::Malformed(e.to_string()))?;
    store.edit(&id, req).map(Json)
}

/// Serves the API on `listener` until the process ends.
pub async fn serve(listener: tokio::net::TcpListener, store: Store) -> std::io::Result<()> {
    axum::serve(listener, router(store)).await
}
