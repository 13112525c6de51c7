use std::time::Duration;

use async_trait::async_trait;
use bytes::Bytes;
use futures::stream::{self, BoxStream, StreamExt};
use serde_json::{json, Value};

use super::sse::{excerpt, SseDecoder};
use super::{ChatMessage, LlmClient, LlmConfig, LlmError, TextStream};

/// Client for any server implementing the OpenAI Chat Completions API.
#[derive(Debug, Clone)]
pub struct OpenAiClient {
    http: reqwest::Client,
    config: LlmConfig,
}

type ByteStream = BoxStream<'static, Result<Bytes, reqwest::Error>>;

struct Open {
    decoder: SseDecoder,
    bytes: ByteStream,
    first: Vec<String>,
}

impl OpenAiClient {
    pub fn new(config: LlmConfig) -> Result<Self, LlmError> {
        let http = reqwest::Client::builder()
            .connect_timeout(config.timeout_duration())
            .build()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        Ok(Self { http, config })
    }

    pub fn config(&self) -> &LlmConfig {
        &self.config
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.api_base.trim_end_matches('/'))
    }

    fn api_key(&self) -> Result<Option<String>, LlmError> {
        let var = self.config.api_key_ref.trim();
        if var.is_empty() {
            return Ok(None);
        }
        match std::env::var(var) {
            Ok(key) if !key.is_empty() => Ok(Some(key)),
            _ => Err(LlmError::MissingApiKey(var.to_string())),
        }
    }

    fn body(&self, messages: &[ChatMessage], stream: bool) -> Value {
        json!({
            "model": self.config.model,
            "messages": messages,
            "stream": stream,
            "temperature": self.config.temperature,
        })
    }

    async fn send(&self, body: &Value, key: Option<&str>) -> Result<reqwest::Response, LlmError> {
        let mut request = self.http.post(self.endpoint()).json(body);
        if let Some(key) = key {
            request = request.bearer_auth(key);
        }
        let response = request.send().await.map_err(transport)?;
        let status = response.status().as_u16();
        if response.status().is_success() {
            return Ok(response);
        }
        let text = response.text().await.unwrap_or_default();
        Err(match status {
            401 | 403 => LlmError::AuthFailed {
                status,
                body: excerpt(&text),
            },
            _ => LlmError::UpstreamError {
                status,
                body: excerpt(&text),
            },
        })
    }

    /// Sends the request and reads up to the first content chunk.
    async fn open(&self, body: &Value, key: Option<&str>) -> Result<Open, LlmError> {
        let response = self.send(body, key).await?;
        let mut bytes: ByteStream = response.bytes_stream().boxed();
        let mut decoder = SseDecoder::new();
        loop {
            match bytes.next().await {
                Some(Ok(raw)) => {
                    let first = decoder.push(&raw)?;
                    if !first.is_empty() || decoder.is_done() {
                        return Ok(Open {
                            decoder,
                            bytes,
                            first,
                        });
                    }
                }
                Some(Err(e)) => return Err(transport(e)),
                None => {
                    return Ok(Open {
                        decoder,
                        bytes,
                        first: Vec::new(),
                    })
                }
            }
        }
    }

    async fn with_retries<T, F, Fut>(&self, mut attempt_fn: F) -> Result<(T, u32), LlmError>
    where
        F: FnMut() -> Fut,
        Fut: std::future::Future<Output = Result<T, LlmError>>,
    {
        let timeout = self.config.timeout_duration();
        let mut retries = 0;
        loop {
            let result = match tokio::time::timeout(timeout, attempt_fn()).await {
                Ok(result) => result,
                Err(_) => Err(LlmError::Timeout),
            };
            match result {
                Ok(value) => return Ok((value, retries)),
                Err(e) if e.is_retryable() && retries < self.config.max_retries => {
                    let delay = self.config.retry_backoff_ms.saturating_mul(1 << retries.min(16));
                    tracing::warn!(error = %e, retry = retries + 1, "LLM request failed, retrying");
                    tokio::time::sleep(Duration::from_millis(delay)).await;
                    retries += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

fn transport(e: reqwest::Error) -> LlmError {
    if e.is_timeout() {
        LlmError::Timeout
    } else {
        LlmError::Transport(e.to_string())
    }
}

#[async_trait]
impl LlmClient for OpenAiClient {
    async fn complete_stream(&self, messages: &[ChatMessage]) -> Result<TextStream, LlmError> {
        let key = self.api_key()?;
        let body = self.body(messages, true);
        let (open, retries) = self.with_retries(|| self.open(&body, key.as_deref())).await?;

        let idle = self.config.timeout_duration();
        struct State {
            open: Open,
            queue: std::collections::VecDeque<String>,
            finished: bool,
        }
        let mut state = State {
            queue: open.first.clone().into(),
            open,
            finished: false,
        };
        state.open.first.clear();

        let rest = stream::unfold(state, move |mut st| async move {
            loop {
                if let Some(chunk) = st.queue.pop_front() {
                    return Some((Ok(chunk), st));
                }
                if st.finished || st.open.decoder.is_done() {
                    return None;
                }
                match tokio::time::timeout(idle, st.open.bytes.next()).await {
                    Err(_) => {
                        st.finished = true;
                        return Some((Err(LlmError::StreamInterrupted("idle timeout".into())), st));
                    }
                    Ok(None) => return None,
                    Ok(Some(Err(e))) => {
                        st.finished = true;
                        return Some((Err(LlmError::StreamInterrupted(e.to_string())), st));
                    }
                    Ok(Some(Ok(raw))) => match st.open.decoder.push(&raw) {
                        Ok(chunks) => st.queue.extend(chunks),
                        Err(e) => {
                            st.finished = true;
                            return Some((Err(LlmError::StreamInterrupted(e.to_string())), st));
                        }
                    },
                }
            }
        });
        Ok(TextStream::new(retries, rest.boxed()))
    }

    async fn complete_once(&self, messages: &[ChatMessage]) -> Result<String, LlmError> {
        let key = self.api_key()?;
        let body = self.body(messages, false);
        let (text, _) = self
            .with_retries(|| async {
                let response = self.send(&body, key.as_deref()).await?;
                let value: Value = response.json().await.map_err(transport)?;
                value
                    .pointer("/choices/0/message/content")
                    .map(|c| c.as_str().unwrap_or_default().to_string())
                    .ok_or_else(|| LlmError::InvalidResponse("missing choices[0].message.content".into()))
            })
            .await?;
        Ok(text)
    }
}
