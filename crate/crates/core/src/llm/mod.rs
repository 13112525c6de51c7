//! Text-only LLM access: prompt construction, context rendering and an
//! OpenAI-compatible streaming client.

mod mock;
mod openai;
mod prompt;
mod sse;

use std::pin::Pin;
use std::task::{Context, Poll};

use async_trait::async_trait;
use futures::stream::{BoxStream, Stream, StreamExt, TryStreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use mock::{EchoLlm, FnLlm, ScriptedLlm};
pub use openai::OpenAiClient;
pub use prompt::{assemble_context, build_system_prompt, FewShotDialog, FewShotTurn, PromptConfig};
pub use sse::SseDecoder;
pub(crate) use sse::excerpt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: ChatRole::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: ChatRole::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: ChatRole::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmConfig {
    /// Absolute URL up to and including the version segment, e.g. `https://api.openai.com/v1`.
    pub api_base: String,
    /// Name of the environment variable holding the bearer token; empty for none.
    pub api_key_ref: String,
    pub model: String,
    pub temperature: f64,
    /// Seconds. Bounds time-to-first-chunk and every gap between chunks.
    pub timeout: f64,
    pub max_retries: u32,
    /// First retry delay in milliseconds; doubles per attempt.
    pub retry_backoff_ms: u64,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            api_base: "https://api.openai.com/v1".to_string(),
            api_key_ref: "OPENAI_API_KEY".to_string(),
            model: "gpt-3.5-turbo".to_string(),
            temperature: 0.0,
            timeout: 60.0,
            max_retries: 2,
            retry_backoff_ms: 500,
        }
    }
}

impl LlmConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.api_base.trim().is_empty() {
            return Err("llm.api_base is empty".into());
        }
        match reqwest::Url::parse(&self.api_base) {
            Ok(url) if matches!(url.scheme(), "http" | "https") => {}
            _ => return Err(format!("llm.api_base {:?} is not an absolute http(s) URL", self.api_base)),
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err("llm.temperature must be >= 0".into());
        }
        if !self.timeout.is_finite() || self.timeout <= 0.0 {
            return Err("llm.timeout must be > 0".into());
        }
        if self.max_retries > 10 {
            return Err("llm.max_retries must be at most 10".into());
        }
        Ok(())
    }

    pub fn timeout_duration(&self) -> std::time::Duration {
        std::time::Duration::from_secs_f64(self.timeout)
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum LlmError {
    #[error("authentication failed ({status}): {body}")]
    AuthFailed { status: u16, body: String },
    #[error("LLM request timed out")]
    Timeout,
    #[error("upstream error {status}: {body}")]
    UpstreamError { status: u16, body: String },
    #[error("stream interrupted: {0}")]
    StreamInterrupted(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("API key variable {0} is not set")]
    MissingApiKey(String),
    #[error("malformed LLM response: {0}")]
    InvalidResponse(String),
    #[error("scripted LLM has no reply left")]
    ScriptExhausted,
}

impl LlmError {
    /// Whether a fresh attempt may succeed. Only consulted before the first chunk.
    pub fn is_retryable(&self) -> bool {
        match self {
            LlmError::Timeout | LlmError::Transport(_) => true,
            LlmError::UpstreamError { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            LlmError::AuthFailed { .. } => "llm_auth_failed",
            LlmError::Timeout => "llm_timeout",
            LlmError::UpstreamError { .. } => "llm_upstream_error",
            LlmError::StreamInterrupted(_) => "llm_stream_interrupted",
            LlmError::Transport(_) => "llm_transport",
            LlmError::MissingApiKey(_) => "llm_missing_api_key",
            LlmError::InvalidResponse(_) => "llm_invalid_response",
            LlmError::ScriptExhausted => "llm_script_exhausted",
        }
    }
}

/// Ordered text chunks of one completion.
pub struct TextStream {
    /// Failed attempts made before this stream opened.
    pub retries: u32,
    inner: BoxStream<'static, Result<String, LlmError>>,
}

impl TextStream {
    pub fn new(retries: u32, inner: BoxStream<'static, Result<String, LlmError>>) -> Self {
        Self { retries, inner }
    }

    pub fn from_chunks(chunks: Vec<String>) -> Self {
        Self::new(0, futures::stream::iter(chunks.into_iter().map(Ok)).boxed())
    }

    pub async fn collect_text(self) -> Result<String, LlmError> {
        self.inner.try_collect::<Vec<_>>().await.map(|v| v.concat())
    }
}

impl std::fmt::Debug for TextStream {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TextStream").field("retries", &self.retries).finish_non_exhaustive()
    }
}

impl Stream for TextStream {
    type Item = Result<String, LlmError>;

    fn poll_next(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<Option<Self::Item>> {
        self.inner.poll_next_unpin(cx)
    }
}

#[async_trait]
pub trait LlmClient: Send + Sync {
    async fn complete_stream(&self, messages: &[ChatMessage]) -> Result<TextStream, LlmError>;

    /// The whole completion, or an error; never a partial text.
    async fn complete_once(&self, messages: &[ChatMessage]) -> Result<String, LlmError> {
        self.complete_stream(messages).await?.collect_text().await
    }
}

/// Splits `text` into pieces of at most `size` characters.
pub fn split_chunks(text: &str, size: usize) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    chars.chunks(size.max(1)).map(|c| c.iter().collect()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(LlmConfig::default().validate().is_ok());
        let bad = |f: fn(&mut LlmConfig)| {
            let mut c = LlmConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.api_base = "".into()));
        assert!(bad(|c| c.api_base = "localhost:8000/v1".into()));
        assert!(bad(|c| c.timeout = 0.0));
        assert!(bad(|c| c.temperature = -0.5));
    }

    #[test]
    fn retryability() {
        assert!(LlmError::Timeout.is_retryable());
        assert!(LlmError::UpstreamError { status: 503, body: String::new() }.is_retryable());
        assert!(LlmError::UpstreamError { status: 429, body: String::new() }.is_retryable());
        assert!(!LlmError::UpstreamError { status: 400, body: String::new() }.is_retryable());
        assert!(!LlmError::AuthFailed { status: 401, body: String::new() }.is_retryable());
        assert!(!LlmError::StreamInterrupted("x".into()).is_retryable());
    }

    #[test]
    fn chunk_split_respects_chars() {
        assert_eq!(split_chunks("héllo", 2), vec!["hé", "ll", "o"]);
        assert!(split_chunks("", 3).is_empty());
    }
}
