//! Image backends: the deterministic mock renderer and the SD WebUI HTTP driver.

mod font;
mod mock;
mod sd;

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tokio::sync::Semaphore;

pub use mock::{mock_render, MAX_SIZE, MIN_SIZE};

use crate::router::{ChangeClass, GenerationKind, GenerationRequest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Capability {
    #[serde(rename = "txt2img")]
    Txt2Img,
    #[serde(rename = "text-edit")]
    TextEdit,
    #[serde(rename = "image-prompt")]
    ImagePrompt,
    #[serde(rename = "upscale")]
    Upscale,
}

impl Capability {
    pub const ALL: [Capability; 4] = [
        Capability::Txt2Img,
        Capability::TextEdit,
        Capability::ImagePrompt,
        Capability::Upscale,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Capability::Txt2Img => "txt2img",
            Capability::TextEdit => "text-edit",
            Capability::ImagePrompt => "image-prompt",
            Capability::Upscale => "upscale",
        }
    }
}

impl fmt::Display for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Mock,
    SdHttp,
}

/// img2img denoising strengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Strengths {
    pub small: f64,
    pub large: f64,
    pub upscale: f64,
}

impl Default for Strengths {
    fn default() -> Self {
        Self {
            small: 0.35,
            large: 0.75,
            upscale: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendSpec {
    pub name: String,
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    pub capabilities: Vec<Capability>,
    #[serde(default = "default_size")]
    pub default_size: (u32, u32),
    /// Seconds.
    #[serde(default = "default_timeout")]
    pub timeout: f64,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub strengths: Strengths,
    #[serde(default = "default_steps")]
    pub steps: u32,
}

fn default_size() -> (u32, u32) {
    (512, 512)
}

fn default_timeout() -> f64 {
    120.0
}

fn default_max_in_flight() -> usize {
    2
}

fn default_steps() -> u32 {
    20
}

impl BackendSpec {
    pub fn mock(name: &str) -> Self {
        Self {
            name: name.to_string(),
            kind: BackendKind::Mock,
            base_url: None,
            capabilities: Capability::ALL.to_vec(),
            default_size: default_size(),
            timeout: 30.0,
            max_in_flight: default_max_in_flight(),
            strengths: Strengths::default(),
            steps: default_steps(),
        }
    }

    pub fn sd_http(name: &str, base_url: &str, capabilities: &[Capability]) -> Self {
        Self {
            name: name.to_string(),
            kind: BackendKind::SdHttp,
            base_url: Some(base_url.trim_end_matches('/').to_string()),
            capabilities: capabilities.to_vec(),
            default_size: default_size(),
            timeout: default_timeout(),
            max_in_flight: default_max_in_flight(),
            strengths: Strengths::default(),
            steps: default_steps(),
        }
    }

    pub fn timeout_duration(&self) -> Duration {
        Duration::from_secs_f64(self.timeout)
    }

    pub fn validate(&self) -> Result<(), String> {
        let name = &self.name;
        if name.trim().is_empty() {
            return Err("backend name must not be empty".into());
        }
        if self.capabilities.is_empty() {
            return Err(format!("backend {name:?} advertises no capabilities"));
        }
        match self.kind {
            BackendKind::Mock => {
                if Capability::ALL.iter().any(|c| !self.capabilities.contains(c)) {
                    return Err(format!("mock backend {name:?} must advertise all capabilities"));
                }
            }
            BackendKind::SdHttp => match &self.base_url {
                Some(url) if url.starts_with("http://") || url.starts_with("https://") => {}
                _ => return Err(format!("sd_http backend {name:?} needs an http(s) base_url")),
            },
        }
        let (w, h) = self.default_size;
        if !(MIN_SIZE..=MAX_SIZE).contains(&w) || !(MIN_SIZE..=MAX_SIZE).contains(&h) {
            return Err(format!("backend {name:?} default_size out of range"));
        }
        if !(self.timeout.is_finite() && self.timeout > 0.0) {
            return Err(format!("backend {name:?} timeout must be positive"));
        }
        if self.max_in_flight == 0 {
            return Err(format!("backend {name:?} max_in_flight must be at least 1"));
        }
        let s = &self.strengths;
        if [s.small, s.large, s.upscale].iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(format!("backend {name:?} strengths must be within [0, 1]"));
        }
        Ok(())
    }

    /// Denoising strength for an img2img request.
    pub fn strength_for(&self, kind: GenerationKind, change: Option<ChangeClass>) -> f64 {
        match (kind, change) {
            (GenerationKind::RefineUpscale, _) => self.strengths.upscale,
            (_, Some(ChangeClass::Small)) => self.strengths.small,
            _ => self.strengths.large,
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum BackendError {
    #[error("backend timed out")]
    BackendTimeout,
    #[error("backend returned HTTP {status}: {body}")]
    BackendHttpError { status: u16, body: String },
    #[error("backend returned an undecodable image: {0}")]
    DecodeError(String),
    #[error("request needs the parent image bytes")]
    MissingParent,
    #[error("size {width}x{height} outside [{MIN_SIZE}, {MAX_SIZE}]")]
    SizeOutOfRange { width: u32, height: u32 },
    #[error("backend unreachable: {0}")]
    Unreachable(String),
    #[error("unknown backend {0:?}")]
    UnknownBackend(String),
}

impl BackendError {
    pub fn code(&self) -> &'static str {
        match self {
            BackendError::BackendTimeout => "backend_timeout",
            BackendError::BackendHttpError { .. } => "backend_http_error",
            BackendError::DecodeError(_) => "decode_error",
            BackendError::MissingParent => "missing_parent",
            BackendError::SizeOutOfRange { .. } => "size_out_of_range",
            BackendError::Unreachable(_) => "backend_unreachable",
            BackendError::UnknownBackend(_) => "unknown_backend",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderResult {
    pub bytes: Vec<u8>,
    /// Hex SHA-256 of `bytes`.
    pub content_digest: String,
    pub elapsed_ms: u64,
    pub backend_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "status", content = "reason", rename_all = "lowercase")]
pub enum Health {
    Ok,
    Degraded(String),
    Down(String),
}

pub fn digest_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Registered backends with a per-backend concurrency limit.
pub struct BackendRegistry {
    specs: Vec<BackendSpec>,
    limits: HashMap<String, Arc<Semaphore>>,
    http: reqwest::Client,
}

impl BackendRegistry {
    pub fn new(specs: Vec<BackendSpec>) -> Self {
        let limits = specs
            .iter()
            .map(|s| (s.name.clone(), Arc::new(Semaphore::new(s.max_in_flight.max(1)))))
            .collect();
        Self {
            specs,
            limits,
            http: reqwest::Client::new(),
        }
    }

    pub fn specs(&self) -> &[BackendSpec] {
        &self.specs
    }

    pub fn get(&self, name: &str) -> Option<&BackendSpec> {
        self.specs.iter().find(|s| s.name == name)
    }

    /// Renders on the named backend, retrying once after a timeout. Every
    /// request carries a fixed seed, so the retry is idempotent.
    pub async fn generate(
        &self,
        name: &str,
        request: &GenerationRequest,
        parent_bytes: Option<&[u8]>,
    ) -> Result<RenderResult, BackendError> {
        let spec = self
            .get(name)
            .ok_or_else(|| BackendError::UnknownBackend(name.to_string()))?;
        let _permit = self.limits[name].acquire().await.expect("semaphore never closed");
        match generate(&self.http, spec, request, parent_bytes).await {
            Err(BackendError::BackendTimeout) => {
                tracing::warn!(backend = name, image = %request.image_id, "backend timed out, retrying once");
                generate(&self.http, spec, request, parent_bytes).await
            }
            other => other,
        }
    }

    pub async fn health(&self, name: &str) -> Health {
        match self.get(name) {
            Some(spec) => health(&self.http, spec).await,
            None => Health::Down(format!("unknown backend {name:?}")),
        }
    }
}

/// One attempt on one backend.
pub async fn generate(
    http: &reqwest::Client,
    spec: &BackendSpec,
    request: &GenerationRequest,
    parent_bytes: Option<&[u8]>,
) -> Result<RenderResult, BackendError> {
    let needs_parent = request.kind != GenerationKind::New;
    if needs_parent && parent_bytes.is_none() {
        return Err(BackendError::MissingParent);
    }
    let started = Instant::now();
    let bytes = match spec.kind {
        BackendKind::Mock => {
            let prompt = request.refined.positive.clone();
            let (seed, w, h) = (request.seed, request.width, request.height);
            let parent_digest = parent_bytes.filter(|_| needs_parent).map(digest_hex);
            tokio::task::spawn_blocking(move || mock_render(&prompt, seed, w, h, parent_digest.as_deref()))
                .await
                .map_err(|e| BackendError::Unreachable(format!("render task failed: {e}")))??
        }
        BackendKind::SdHttp => sd::generate(http, spec, request, parent_bytes.filter(|_| needs_parent)).await?,
    };
    let (width, height) = png_dimensions(&bytes)?;
    Ok(RenderResult {
        content_digest: digest_hex(&bytes),
        bytes,
        elapsed_ms: started.elapsed().as_millis() as u64,
        backend_name: spec.name.clone(),
        width,
        height,
    })
}

pub async fn health(http: &reqwest::Client, spec: &BackendSpec) -> Health {
    match spec.kind {
        BackendKind::Mock => Health::Ok,
        BackendKind::SdHttp => sd::health(http, spec).await,
    }
}

/// Fully decodes `bytes` as PNG and returns its dimensions.
pub fn png_dimensions(bytes: &[u8]) -> Result<(u32, u32), BackendError> {
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder
        .read_info()
        .map_err(|e| BackendError::DecodeError(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| BackendError::DecodeError("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| BackendError::DecodeError(e.to_string()))?;
    Ok((info.width, info.height))
}
