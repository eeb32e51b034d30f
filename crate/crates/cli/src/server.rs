//! JSON HTTP API for browser chat clients.
//!
//! - `GET /teams` → `{"teams": [..]}`
//! - `POST /sessions` `{"team": ..}` → `{"session_id": .., "teams": [..]}`
//! - `POST /sessions/{id}/messages` `{"text": ..}` → chat response
//!
//! Errors come back as `{"error": ..}` with a 4xx/5xx status.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use kgcopy::serving::{ChatEngine, ChatResponse, ChatSession};
use kgcopy::Error;

/// Live sessions beyond this are refused rather than growing memory without bound.
pub const MAX_SESSIONS: usize = 10_000;

type SessionHandle = Arc<tokio::sync::Mutex<ChatSession>>;

pub struct AppState {
    engine: Arc<ChatEngine>,
    sessions: Mutex<HashMap<String, SessionHandle>>,
}

impl AppState {
    pub fn new(engine: ChatEngine) -> Arc<Self> {
        Arc::new(AppState {
            engine: Arc::new(engine),
            sessions: Mutex::new(HashMap::new()),
        })
    }
}

#[derive(Debug, Deserialize)]
pub struct NewSession {
    pub team: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub teams: Vec<String>,
}

#[derive(Debug, Deserialize)]
pub struct Message {
    pub text: String,
}

pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError(e.status(), e.body_text())
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::UnknownTeam(_) | Error::Empty(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/teams", get(teams))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/messages", post(message))
        .with_state(state)
}

async fn teams(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({ "teams": state.engine.teams() }))
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    req: Result<Json<NewSession>, JsonRejection>,
) -> Result<Json<SessionCreated>, ApiError> {
    let Json(req) = req?;
    let id = uuid::Uuid::new_v4().to_string();
    let session = state.engine.session(id.clone(), &req.team)?;
    let mut sessions = state.sessions.lock().expect("session table poisoned");
    if sessions.len() >= MAX_SESSIONS {
        return Err(ApiError(StatusCode::SERVICE_UNAVAILABLE, "too many live sessions".into()));
    }
    sessions.insert(id.clone(), Arc::new(tokio::sync::Mutex::new(session)));
    log::info!("session {id} opened for {}", req.team);
    Ok(Json(SessionCreated {
        session_id: id,
        teams: state.engine.teams(),
    }))
}

async fn message(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    req: Result<Json<Message>, JsonRejection>,
) -> Result<Json<ChatResponse>, ApiError> {
    let Json(req) = req?;
    let handle = state
        .sessions
        .lock()
        .expect("session table poisoned")
        .get(&id)
        .cloned()
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("no session {id}")))?;
    // held until the turn finishes, so turns of one session never overlap
    let mut session = handle.lock_owned().await;
    let engine = Arc::clone(&state.engine);
    let response = tokio::task::spawn_blocking(move || engine.turn(&mut session, &req.text))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(response))
}

pub async fn serve(engine: ChatEngine, port: u16) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(AppState::new(engine)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
