//! Decoder for the `data:` lines of an OpenAI-style completion stream.

use serde_json::Value;

use super::LlmError;

#[derive(Debug, Default)]
pub struct SseDecoder {
    buf: Vec<u8>,
    done: bool,
}

impl SseDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    /// `[DONE]` has been seen.
    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Consumes raw bytes, returning the content deltas of every complete line.
    pub fn push(&mut self, bytes: &[u8]) -> Result<Vec<String>, LlmError> {
        self.buf.extend_from_slice(bytes);
        let mut out = Vec::new();
        while let Some(pos) = self.buf.iter().position(|b| *b == b'\n') {
            let line: Vec<u8> = self.buf.drain(..=pos).collect();
            if self.done {
                continue;
            }
            let line = String::from_utf8_lossy(&line);
            if let Some(content) = self.line(line.trim_end_matches(['\r', '\n']))? {
                out.push(content);
            }
        }
        Ok(out)
    }

    fn line(&mut self, line: &str) -> Result<Option<String>, LlmError> {
        let Some(data) = line.strip_prefix("data:") else {
            // comments, event names, ids and blank separators carry no content
            return Ok(None);
        };
        let data = data.strip_prefix(' ').unwrap_or(data);
        if data.trim() == "[DONE]" {
            self.done = true;
            return Ok(None);
        }
        let value: Value = serde_json::from_str(data)
            .map_err(|e| LlmError::InvalidResponse(format!("bad stream frame: {e}")))?;
        if let Some(err) = value.get("error") {
            return Err(LlmError::UpstreamError {
                status: 0,
                body: excerpt(&err.to_string()),
            });
        }
        let content = value
            .pointer("/choices/0/delta/content")
            .and_then(Value::as_str)
            .unwrap_or_default();
        Ok((!content.is_empty()).then(|| content.to_string()))
    }
}

pub(crate) fn excerpt(body: &str) -> String {
    const MAX: usize = 200;
    match body.char_indices().nth(MAX) {
        Some((idx, _)) => format!("{}…", &body[..idx]),
        None => body.to_string(),
    }
}
