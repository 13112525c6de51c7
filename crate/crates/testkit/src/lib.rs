//! Scriptable stand-ins for the two upstream services it2i talks to:
//! an OpenAI-compatible chat endpoint and a Stable Diffusion WebUI.
//!
//! Both bind `127.0.0.1:0`, count every request, and keep the JSON bodies
//! they received so tests can assert on the wire format.

use std::collections::VecDeque;
use std::io::Cursor;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::Body;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use serde_json::{json, Value};
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

/// One scripted answer from the chat stub.
#[derive(Debug, Clone)]
pub enum ChatReply {
    /// Stream the given content pieces, `delay` apart, then `[DONE]`.
    /// Non-stream requests get the concatenation.
    Chunks { pieces: Vec<String>, delay: Duration },
    /// Reply with a bare status code and body.
    Status(u16, String),
    /// Never answer.
    Hang,
    /// Send the first `n` pieces, then drop the connection.
    Truncated { pieces: Vec<String>, n: usize },
}

impl ChatReply {
    pub fn text(content: &str) -> Self {
        Self::Chunks {
            pieces: vec![content.to_string()],
            delay: Duration::ZERO,
        }
    }

    /// Splits `content` into pieces of at most `size` characters.
    pub fn chunked(content: &str, size: usize, delay: Duration) -> Self {
        let chars: Vec<char> = content.chars().collect();
        let pieces = chars
            .chunks(size.max(1))
            .map(|c| c.iter().collect())
            .collect();
        Self::Chunks { pieces, delay }
    }
}

#[derive(Default)]
struct ChatState {
    script: Mutex<VecDeque<ChatReply>>,
    /// Used once the script runs dry.
    fallback: Mutex<Option<ChatReply>>,
    hits: AtomicUsize,
    requests: Mutex<Vec<Value>>,
}

/// OpenAI-compatible `/chat/completions` stub.
pub struct ChatStub {
    addr: SocketAddr,
    state: Arc<ChatState>,
    task: JoinHandle<()>,
}

impl ChatStub {
    pub async fn start(script: Vec<ChatReply>) -> Self {
        let state = Arc::new(ChatState {
            script: Mutex::new(script.into()),
            ..Default::default()
        });
        let app = Router::new()
            .route("/v1/chat/completions", post(chat_completions))
            .with_state(state.clone());
        let (addr, task) = serve(app).await;
        Self { addr, state, task }
    }

    /// Like [`start`](Self::start), answering every request with `reply`.
    pub async fn always(reply: ChatReply) -> Self {
        let stub = Self::start(Vec::new()).await;
        *stub.state.fallback.lock().unwrap() = Some(reply);
        stub
    }

    /// Base URL to put in `api_base`, ending in `/v1`.
    pub fn api_base(&self) -> String {
        format!("http://{}/v1", self.addr)
    }

    pub fn hits(&self) -> usize {
        self.state.hits.load(Ordering::SeqCst)
    }

    pub fn requests(&self) -> Vec<Value> {
        self.state.requests.lock().unwrap().clone()
    }

    pub fn push(&self, reply: ChatReply) {
        self.state.script.lock().unwrap().push_back(reply);
    }
}

impl Drop for ChatStub {
    fn drop(&mut self) {
        self.task.abort();
    }
}

async fn chat_completions(State(state): State<Arc<ChatState>>, Json(body): Json<Value>) -> Response {
    state.hits.fetch_add(1, Ordering::SeqCst);
    state.requests.lock().unwrap().push(body.clone());
    let reply = state
        .script
        .lock()
        .unwrap()
        .pop_front()
        .or_else(|| state.fallback.lock().unwrap().clone())
        .unwrap_or_else(|| ChatReply::Status(500, "script exhausted".into()));
    let streaming = body.get("stream").and_then(Value::as_bool).unwrap_or(false);

    match reply {
        ChatReply::Status(code, text) => {
            let status = StatusCode::from_u16(code).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
            (status, text).into_response()
        }
        ChatReply::Hang => {
            std::future::pending::<()>().await;
            unreachable!()
        }
        ChatReply::Chunks { pieces, delay } if streaming => {
            let frames = futures_frames(pieces, delay, true);
            sse_response(frames)
        }
        ChatReply::Truncated { pieces, n } if streaming => {
            let pieces: Vec<String> = pieces.into_iter().take(n).collect();
            let frames = futures_frames(pieces, Duration::ZERO, false);
            sse_response(frames)
        }
        ChatReply::Chunks { pieces, .. } | ChatReply::Truncated { pieces, .. } => {
            let content: String = pieces.concat();
            Json(json!({
                "id": "chatcmpl-stub",
                "object": "chat.completion",
                "choices": [{"index": 0, "message": {"role": "assistant", "content": content}, "finish_reason": "stop"}]
            }))
            .into_response()
        }
    }
}

type Frames = tokio::sync::mpsc::Receiver<Result<String, std::io::Error>>;

fn futures_frames(pieces: Vec<String>, delay: Duration, finish: bool) -> Frames {
    let (tx, rx) = tokio::sync::mpsc::channel(16);
    tokio::spawn(async move {
        let role = json!({"choices": [{"index": 0, "delta": {"role": "assistant"}}]});
        if tx.send(Ok(format!("data: {role}\n\n"))).await.is_err() {
            return;
        }
        for piece in pieces {
            if !delay.is_zero() {
                tokio::time::sleep(delay).await;
            }
            let frame = json!({"choices": [{"index": 0, "delta": {"content": piece}}]});
            if tx.send(Ok(format!("data: {frame}\n\n"))).await.is_err() {
                return;
            }
        }
        if finish {
            let stop = json!({"choices": [{"index": 0, "delta": {}, "finish_reason": "stop"}]});
            let _ = tx.send(Ok(format!("data: {stop}\n\n"))).await;
            let _ = tx.send(Ok("data: [DONE]\n\n".to_string())).await;
        } else {
            // let the frames reach the client before the connection dies
            tokio::time::sleep(Duration::from_millis(50)).await;
            let _ = tx
                .send(Err(std::io::Error::new(
                    std::io::ErrorKind::ConnectionReset,
                    "stub dropped the stream",
                )))
                .await;
        }
    });
    rx
}

fn sse_response(frames: Frames) -> Response {
    let stream = futures::stream::unfold(frames, |mut rx| async move {
        rx.recv().await.map(|frame| (frame, rx))
    });
    Response::builder()
        .header(header::CONTENT_TYPE, "text/event-stream")
        .body(Body::from_stream(stream))
        .unwrap()
}

#[derive(Default)]
struct SdState {
    hits: AtomicUsize,
    requests: Mutex<Vec<(String, Value)>>,
    png: Vec<u8>,
    /// Answer this many generation requests with a hang before serving normally.
    hang_first: AtomicUsize,
    /// Status code to answer generation requests with, 0 for success.
    fail_status: AtomicUsize,
    /// Return this string instead of valid base64 when set.
    bad_payload: Mutex<Option<String>>,
}

/// Stable Diffusion WebUI stub: `/sdapi/v1/txt2img`, `/sdapi/v1/img2img`
/// and `/sdapi/v1/progress`. Every generation returns the same PNG.
pub struct SdStub {
    addr: SocketAddr,
    state: Arc<SdState>,
    task: JoinHandle<()>,
}

impl SdStub {
    pub async fn start(png: Vec<u8>) -> Self {
        let state = Arc::new(SdState {
            png,
            ..Default::default()
        });
        let app = Router::new()
            .route("/sdapi/v1/txt2img", post(sd_txt2img))
            .route("/sdapi/v1/img2img", post(sd_img2img))
            .route("/sdapi/v1/progress", get(|| async { Json(json!({"progress": 0.0})) }))
            .with_state(state.clone());
        let (addr, task) = serve(app).await;
        Self { addr, state, task }
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn hits(&self) -> usize {
        self.state.hits.load(Ordering::SeqCst)
    }

    /// `(path, body)` of every generation request.
    pub fn requests(&self) -> Vec<(String, Value)> {
        self.state.requests.lock().unwrap().clone()
    }

    pub fn hang_first(&self, n: usize) {
        self.state.hang_first.store(n, Ordering::SeqCst);
    }

    pub fn fail_with(&self, status: u16) {
        self.state.fail_status.store(status as usize, Ordering::SeqCst);
    }

    pub fn bad_payload(&self, payload: &str) {
        *self.state.bad_payload.lock().unwrap() = Some(payload.to_string());
    }
}

impl Drop for SdStub {
    fn drop(&mut self) {
        self.task.abort();
    }
}

async fn sd_txt2img(State(state): State<Arc<SdState>>, Json(body): Json<Value>) -> Response {
    sd_generate(state, "/sdapi/v1/txt2img", body).await
}

async fn sd_img2img(State(state): State<Arc<SdState>>, Json(body): Json<Value>) -> Response {
    sd_generate(state, "/sdapi/v1/img2img", body).await
}

async fn sd_generate(state: Arc<SdState>, path: &str, body: Value) -> Response {
    state.hits.fetch_add(1, Ordering::SeqCst);
    state.requests.lock().unwrap().push((path.to_string(), body));
    let hang = state
        .hang_first
        .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
        .is_ok();
    if hang {
        std::future::pending::<()>().await;
    }
    let status = state.fail_status.load(Ordering::SeqCst);
    if status != 0 {
        let status = StatusCode::from_u16(status as u16).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        return (status, "stub failure").into_response();
    }
    let payload = state
        .bad_payload
        .lock()
        .unwrap()
        .clone()
        .unwrap_or_else(|| base64::engine::general_purpose::STANDARD.encode(&state.png));
    Json(json!({"images": [payload], "parameters": {}, "info": "{}"})).into_response()
}

/// A solid-colour 8-bit RGB PNG.
pub fn solid_png(width: u32, height: u32, rgb: [u8; 3]) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(Cursor::new(&mut out), width, height);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder.write_header().expect("png header");
        let data: Vec<u8> = (0..width * height).flat_map(|_| rgb).collect();
        writer.write_image_data(&data).expect("png data");
    }
    out
}

/// An address nothing is listening on.
pub async fn refused_addr() -> SocketAddr {
    let listener = TcpListener::bind("127.0.0.1:0").await.expect("bind");
    let addr = listener.local_addr().expect("addr");
    drop(listener);
    addr
}

async fn serve(app: Router) -> (SocketAddr, JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").await.expect("bind stub");
    let addr = listener.local_addr().expect("stub addr");
    let task = tokio::spawn(async move {
        let _ = axum::serve(listener, app).await;
    });
    (addr, task)
}
