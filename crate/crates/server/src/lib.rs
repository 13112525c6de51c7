//! HTTP/SSE gateway over the turn engine, plus the `it2i` command line.
//!
//! Each session has a broadcast hub; every SSE subscriber of a session sees
//! the same event sequence for turns started after it subscribed.

pub mod cli;

use std::collections::HashMap;
use std::convert::Infallible;
use std::sync::{Arc, Mutex};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::{Stream, StreamExt};
use serde::Deserialize;
use serde_json::json;
use tokio::sync::broadcast;
use tokio_stream::wrappers::BroadcastStream;

use it2i_core::config::ServiceConfig;
use it2i_core::engine::{EngineError, Orchestrator, TurnEvent};
use it2i_core::llm::{LlmClient, OpenAiClient};
use it2i_core::session::{ImageId, SessionError, SessionId, SessionStore};

const HUB_CAPACITY: usize = 1024;

pub struct AppState {
    engine: Orchestrator,
    hubs: Mutex<HashMap<SessionId, broadcast::Sender<TurnEvent>>>,
}

impl AppState {
    pub fn new(engine: Orchestrator) -> Arc<Self> {
        Arc::new(Self {
            engine,
            hubs: Mutex::new(HashMap::new()),
        })
    }

    pub fn engine(&self) -> &Orchestrator {
        &self.engine
    }

    fn hub(&self, id: &SessionId) -> broadcast::Sender<TurnEvent> {
        self.hubs
            .lock()
            .unwrap()
            .entry(id.clone())
            .or_insert_with(|| broadcast::channel(HUB_CAPACITY).0)
            .clone()
    }
}

/// Opens the store under `config.data_dir` and talks to `config.llm` for
/// both chat and prompt refinement.
pub fn build_engine(config: ServiceConfig) -> Result<Orchestrator, String> {
    let store = SessionStore::open(&config.data_dir)
        .map_err(|e| format!("cannot open data dir {}: {e}", config.data_dir.display()))?;
    let client: Arc<dyn LlmClient> = Arc::new(OpenAiClient::new(config.llm.clone()).map_err(|e| e.to_string())?);
    Ok(Orchestrator::new(Arc::new(store), config, client.clone(), client))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/sessions", post(create_session).get(list_sessions))
        .route("/v1/sessions/{id}", get(get_session))
        .route("/v1/sessions/{id}/messages", post(post_message))
        .route("/v1/sessions/{id}/events", get(stream_events))
        .route("/v1/images/{id}", get(get_image))
        .with_state(state)
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl ToString) -> Self {
        Self {
            status,
            code,
            message: message.to_string(),
        }
    }

    fn not_found(message: impl ToString) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"error": {"code": self.code, "message": self.message}});
        (self.status, Json(body)).into_response()
    }
}

impl From<SessionError> for ApiError {
    fn from(err: SessionError) -> Self {
        match err {
            SessionError::NotFound(_) | SessionError::UnknownImage(_) => ApiError::not_found(err),
            SessionError::ConfigInvalid(_) => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "config_invalid", err),
            _ => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "storage_error", err),
        }
    }
}

impl From<EngineError> for ApiError {
    fn from(err: EngineError) -> Self {
        match err {
            EngineError::NotFound(_) => ApiError::not_found(err),
            EngineError::TurnInFlight(_) => ApiError::new(StatusCode::CONFLICT, "turn_in_flight", err),
            EngineError::EmptyMessage => ApiError::new(StatusCode::BAD_REQUEST, "empty_message", err),
            EngineError::Session(inner) => inner.into(),
        }
    }
}

fn session_id(raw: &str) -> Result<SessionId, ApiError> {
    SessionId::parse(raw).ok_or_else(|| ApiError::not_found(format!("session {raw} not found")))
}

async fn create_session(State(state): State<Arc<AppState>>) -> Result<impl IntoResponse, ApiError> {
    let session = state.engine.create_session()?;
    Ok((StatusCode::CREATED, Json(json!({"session_id": session.session_id}))))
}

async fn list_sessions(State(state): State<Arc<AppState>>) -> Result<Json<Vec<SessionId>>, ApiError> {
    Ok(Json(state.engine.store().list_sessions()?))
}

async fn get_session(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Response, ApiError> {
    let session = state.engine.store().get(&session_id(&id)?)?;
    Ok(Json(session).into_response())
}

#[derive(Deserialize)]
struct MessageBody {
    text: String,
}

async fn post_message(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Result<Json<MessageBody>, JsonRejection>,
) -> Result<impl IntoResponse, ApiError> {
    let sid = session_id(&id)?;
    let Json(body) = body.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "malformed_body", e.body_text()))?;
    let mut handle = state.engine.run_turn(&sid, &body.text)?;
    let hub = state.hub(&sid);
    tokio::spawn(async move {
        while let Some(event) = handle.events.recv().await {
            // no subscribers is fine; the log has everything
            let _ = hub.send(event);
        }
    });
    Ok((
        StatusCode::ACCEPTED,
        Json(json!({"session_id": sid, "message_id": handle.user_message_id})),
    ))
}

async fn stream_events(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let sid = session_id(&id)?;
    state.engine.store().get(&sid)?;
    let events = BroadcastStream::new(state.hub(&sid).subscribe()).filter_map(move |item| async move {
        match item {
            Ok(event) => Some(Ok(Event::default()
                .event(event.name())
                .json_data(&event)
                .expect("events serialize"))),
            Err(err) => {
                tracing::warn!("sse subscriber fell behind: {err}");
                None
            }
        }
    });
    Ok(Sse::new(events).keep_alive(KeepAlive::default()))
}

async fn get_image(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let image_id = ImageId::parse(&id).ok_or_else(|| ApiError::not_found(format!("image {id} not found")))?;
    match state.engine.image_bytes(&image_id)? {
        Some(bytes) => Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response()),
        None => Err(ApiError::new(
            StatusCode::NOT_FOUND,
            "image_not_ready",
            format!("image {id} has no rendered bytes"),
        )),
    }
}
