//! In-process LLM stand-ins used by tests, scripted replays and the eval harness.

use std::collections::VecDeque;
use std::sync::Mutex;
use std::time::Duration;

use async_trait::async_trait;
use futures::stream::{self, StreamExt};

use super::{split_chunks, ChatMessage, ChatRole, LlmClient, LlmError, TextStream};

/// Plays back canned completions in order, one per request.
pub struct ScriptedLlm {
    replies: Mutex<VecDeque<String>>,
    chunk_chars: usize,
    delay: Duration,
    seen: Mutex<Vec<Vec<ChatMessage>>>,
}

impl ScriptedLlm {
    pub fn new<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            replies: Mutex::new(replies.into_iter().map(Into::into).collect()),
            chunk_chars: 7,
            delay: Duration::ZERO,
            seen: Mutex::new(Vec::new()),
        }
    }

    /// Streams each reply in pieces of `chunk_chars`, waiting `delay` before each.
    pub fn with_chunking(mut self, chunk_chars: usize, delay: Duration) -> Self {
        self.chunk_chars = chunk_chars.max(1);
        self.delay = delay;
        self
    }

    pub fn push(&self, reply: impl Into<String>) {
        self.replies.lock().unwrap().push_back(reply.into());
    }

    pub fn remaining(&self) -> usize {
        self.replies.lock().unwrap().len()
    }

    /// Every context this client was asked to complete.
    pub fn seen(&self) -> Vec<Vec<ChatMessage>> {
        self.seen.lock().unwrap().clone()
    }
}

#[async_trait]
impl LlmClient for ScriptedLlm {
    async fn complete_stream(&self, messages: &[ChatMessage]) -> Result<TextStream, LlmError> {
        self.seen.lock().unwrap().push(messages.to_vec());
        let reply = self
            .replies
            .lock()
            .unwrap()
            .pop_front()
            .ok_or(LlmError::ScriptExhausted)?;
        let delay = self.delay;
        let chunks = split_chunks(&reply, self.chunk_chars);
        let inner = stream::iter(chunks)
            .then(move |chunk| async move {
                if !delay.is_zero() {
                    tokio::time::sleep(delay).await;
                }
                Ok(chunk)
            })
            .boxed();
        Ok(TextStream::new(0, inner))
    }
}

/// Replies with the content of the last user message.
#[derive(Debug, Default, Clone)]
pub struct EchoLlm;

#[async_trait]
impl LlmClient for EchoLlm {
    async fn complete_stream(&self, messages: &[ChatMessage]) -> Result<TextStream, LlmError> {
        let last = messages
            .iter()
            .rev()
            .find(|m| m.role == ChatRole::User)
            .map(|m| m.content.clone())
            .unwrap_or_default();
        Ok(TextStream::from_chunks(split_chunks(&last, 5)))
    }
}

type ReplyFn = dyn Fn(&[ChatMessage]) -> Result<String, LlmError> + Send + Sync;

/// Computes each reply with a closure.
pub struct FnLlm {
    reply: Box<ReplyFn>,
}

impl FnLlm {
    pub fn new<F>(reply: F) -> Self
    where
        F: Fn(&[ChatMessage]) -> Result<String, LlmError> + Send + Sync + 'static,
    {
        Self {
            reply: Box::new(reply),
        }
    }

    /// Always answers `text`.
    pub fn constant(text: &str) -> Self {
        let text = text.to_string();
        Self::new(move |_| Ok(text.clone()))
    }

    pub fn failing(error: LlmError) -> Self {
        Self::new(move |_| Err(error.clone()))
    }
}

#[async_trait]
impl LlmClient for FnLlm {
    async fn complete_stream(&self, messages: &[ChatMessage]) -> Result<TextStream, LlmError> {
        let text = (self.reply)(messages)?;
        Ok(TextStream::from_chunks(split_chunks(&text, 5)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[tokio::test]
    async fn scripted_plays_in_order_then_exhausts() {
        let llm = ScriptedLlm::new(["hello", "world"]).with_chunking(2, Duration::ZERO);
        let stream = llm.complete_stream(&[ChatMessage::user("a")]).await.unwrap();
        let chunks: Vec<_> = stream.map(Result::unwrap).collect().await;
        assert_eq!(chunks, vec!["he", "ll", "o"]);
        assert_eq!(llm.complete_once(&[]).await.unwrap(), "world");
        assert_eq!(llm.complete_once(&[]).await, Err(LlmError::ScriptExhausted));
        assert_eq!(llm.seen().len(), 3);
    }

    #[tokio::test]
    async fn echo_returns_last_user_message() {
        let messages = [
            ChatMessage::system("sys"),
            ChatMessage::user("first"),
            ChatMessage::assistant("reply"),
            ChatMessage::user("a cute dog"),
        ];
        assert_eq!(EchoLlm.complete_once(&messages).await.unwrap(), "a cute dog");
        assert_eq!(EchoLlm.complete_once(&[ChatMessage::user("")]).await.unwrap(), "");
    }
}
