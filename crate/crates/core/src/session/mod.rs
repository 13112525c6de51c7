//! Conversation state and its append-only event log.
//!
//! A session is rebuilt by replaying its log: one JSON record per line,
//! `{"ts": <RFC 3339>, "type": <kind>, "payload": <object>}`. See
//! `docs/session-log.md` for the record schema.

mod store;

use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use store::SessionStore;

use crate::config::ServiceConfig;
use crate::protocol::TagKind;
use crate::router::{ChangeClass, GenerationKind};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SessionId(String);

impl SessionId {
    pub fn random() -> Self {
        Self(uuid::Uuid::new_v4().simple().to_string())
    }

    /// Accepts ASCII letters, digits, `_` and `-`, up to 64 characters.
    pub fn parse(raw: &str) -> Option<Self> {
        let ok = !raw.is_empty()
            && raw.len() <= 64
            && raw.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-');
        ok.then(|| Self(raw.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// `<session id>-i<ordinal>`; unique across sessions.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageId(String);

impl ImageId {
    pub fn new(session: &SessionId, ordinal: u32) -> Self {
        Self(format!("{session}-i{ordinal}"))
    }

    pub fn parse(raw: &str) -> Option<Self> {
        let (session, ordinal) = raw.rsplit_once("-i")?;
        SessionId::parse(session)?;
        ordinal.parse::<u32>().ok().filter(|n| *n > 0)?;
        Some(Self(raw.to_string()))
    }

    pub fn session_id(&self) -> SessionId {
        let (session, _) = self.0.rsplit_once("-i").expect("validated image id");
        SessionId(session.to_string())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ImageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// `<session id>-m<ordinal>`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MessageId(String);

impl MessageId {
    pub fn new(session: &SessionId, ordinal: usize) -> Self {
        Self(format!("{session}-m{ordinal}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for MessageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segment {
    Text(String),
    Image(ImageId),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub message_id: MessageId,
    pub role: Role,
    pub segments: Vec<Segment>,
    /// Unparsed LLM output; assistant messages only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_text: Option<String>,
}

impl Message {
    /// Text segments concatenated.
    pub fn visible_text(&self) -> String {
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::Text(t) => Some(t.as_str()),
                Segment::Image(_) => None,
            })
            .collect()
    }

    pub fn image_refs(&self) -> impl Iterator<Item = &ImageId> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Image(id) => Some(id),
            Segment::Text(_) => None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageStatus {
    Pending,
    Ready,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: ImageId,
    pub ordinal: u32,
    pub tag_kind: TagKind,
    pub kind: GenerationKind,
    /// As emitted by the LLM.
    pub description: String,
    pub refined_prompt: String,
    pub negative_prompt: String,
    pub seed: u64,
    pub parent_id: Option<ImageId>,
    pub backend_name: String,
    pub width: u32,
    pub height: u32,
    /// Hex SHA-256 of the PNG bytes; present iff `status` is ready.
    pub content_digest: Option<String>,
    pub status: ImageStatus,
    #[serde(default)]
    pub downgraded_from_edit: bool,
    #[serde(default)]
    pub change_class: Option<ChangeClass>,
    #[serde(default)]
    pub variation_hint: Option<String>,
    /// Assistant turn that produced the image; selection indexes into the latest batch.
    pub batch: u32,
    /// Degradations and fallbacks applied while producing the image.
    #[serde(default)]
    pub notes: Vec<String>,
    #[serde(default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: SessionId,
    pub created_at: DateTime<Utc>,
    pub messages: Vec<Message>,
    pub images: Vec<ImageRecord>,
    pub focus: Option<ImageId>,
    pub config_snapshot: ServiceConfig,
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("session {0} not found")]
    NotFound(SessionId),
    #[error("session {0} already exists")]
    AlreadyExists(SessionId),
    #[error("message references unknown image {0}")]
    DanglingImageRef(ImageId),
    #[error("parent image {0} does not exist in this session")]
    DanglingParent(ImageId),
    #[error("unknown image {0}")]
    UnknownImage(ImageId),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("corrupt session log {path} at line {line}: {reason}")]
    CorruptLog {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("storage error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionHeader {
    pub session_id: SessionId,
    pub created_at: DateTime<Utc>,
    pub config: ServiceConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocusChange {
    pub image_id: ImageId,
}

/// One line of the session log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload", rename_all = "lowercase")]
#[allow(clippy::large_enum_variant)]
pub enum LogEvent {
    Session(SessionHeader),
    Message(Message),
    /// First occurrence of an id appends the image; later ones update its status.
    Image(ImageRecord),
    Focus(FocusChange),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub ts: String,
    #[serde(flatten)]
    pub event: LogEvent,
}

impl Session {
    pub fn from_header(header: SessionHeader) -> Self {
        Self {
            session_id: header.session_id,
            created_at: header.created_at,
            messages: Vec::new(),
            images: Vec::new(),
            focus: None,
            config_snapshot: header.config,
        }
    }

    pub fn image(&self, id: &ImageId) -> Option<&ImageRecord> {
        self.image_index(id).map(|i| &self.images[i])
    }

    fn image_index(&self, id: &ImageId) -> Option<usize> {
        if id.session_id() != self.session_id {
            return None;
        }
        let (_, ordinal) = id.as_str().rsplit_once("-i")?;
        let ordinal: usize = ordinal.parse().ok()?;
        (ordinal >= 1 && ordinal <= self.images.len()).then(|| ordinal - 1)
    }

    pub fn focused_image(&self) -> Option<&ImageId> {
        self.focus.as_ref()
    }

    pub fn next_message_id(&self) -> MessageId {
        MessageId::new(&self.session_id, self.messages.len() + 1)
    }

    pub fn next_image_ordinal(&self) -> u32 {
        self.images.len() as u32 + 1
    }

    /// Parent chain from `id` back to its root, `id` first.
    pub fn lineage(&self, id: &ImageId) -> Vec<ImageId> {
        let mut chain = Vec::new();
        let mut cursor = self.image(id);
        while let Some(image) = cursor {
            chain.push(image.image_id.clone());
            cursor = image.parent_id.as_ref().and_then(|p| self.image(p));
        }
        chain
    }

    /// Validates `event` against the current state without changing it.
    pub fn check(&self, event: &LogEvent) -> Result<(), SessionError> {
        match event {
            LogEvent::Session(_) => Err(SessionError::InvalidRecord(
                "session header after the first record".into(),
            )),
            LogEvent::Message(message) => {
                let expected = self.next_message_id();
                if message.message_id != expected {
                    return Err(SessionError::InvalidRecord(format!(
                        "message id {} out of sequence (expected {expected})",
                        message.message_id
                    )));
                }
                if message.role == Role::User && message.raw_text.is_some() {
                    return Err(SessionError::InvalidRecord("user message with raw_text".into()));
                }
                for id in message.image_refs() {
                    if self.image(id).is_none() {
                        return Err(SessionError::DanglingImageRef(id.clone()));
                    }
                }
                Ok(())
            }
            LogEvent::Image(record) => self.check_image(record),
            LogEvent::Focus(change) => match self.image(&change.image_id) {
                Some(_) => Ok(()),
                None => Err(SessionError::UnknownImage(change.image_id.clone())),
            },
        }
    }

    fn check_image(&self, record: &ImageRecord) -> Result<(), SessionError> {
        let invalid = |m: String| Err(SessionError::InvalidRecord(m));
        if record.image_id != ImageId::new(&self.session_id, record.ordinal) {
            return invalid(format!(
                "image id {} does not match ordinal {}",
                record.image_id, record.ordinal
            ));
        }
        if record.content_digest.is_some() != (record.status == ImageStatus::Ready) {
            return invalid("content_digest must be set exactly when status is ready".into());
        }
        if let Some(existing) = self.image(&record.image_id) {
            // status update
            if existing.status != ImageStatus::Pending && existing.status != record.status {
                return invalid(format!("image {} is already {:?}", record.image_id, existing.status));
            }
            if existing.parent_id != record.parent_id || existing.kind != record.kind {
                return invalid(format!("image {} changed its lineage", record.image_id));
            }
            return Ok(());
        }
        if record.ordinal != self.next_image_ordinal() {
            return invalid(format!(
                "image ordinal {} out of sequence (expected {})",
                record.ordinal,
                self.next_image_ordinal()
            ));
        }
        match (&record.parent_id, record.kind) {
            (Some(parent), _) => {
                if self.image(parent).is_none() {
                    return Err(SessionError::DanglingParent(parent.clone()));
                }
                if record.kind == GenerationKind::New {
                    return invalid("a new image cannot have a parent".into());
                }
            }
            (None, GenerationKind::Edit | GenerationKind::RefineUpscale) => {
                return invalid("edits and refinements need a parent".into());
            }
            (None, GenerationKind::New) => {}
        }
        if record.tag_kind == TagKind::Edit && record.parent_id.is_none() && !record.downgraded_from_edit {
            return invalid("edit tag without parent must carry the downgrade flag".into());
        }
        if (record.change_class.is_some()) != (record.kind == GenerationKind::Edit) {
            return invalid("change_class is set exactly for edits".into());
        }
        Ok(())
    }

    /// Applies a checked event.
    fn commit(&mut self, event: LogEvent) {
        match event {
            LogEvent::Session(_) => {}
            LogEvent::Message(message) => self.messages.push(message),
            LogEvent::Image(record) => match self.image_index(&record.image_id) {
                Some(i) => self.images[i] = record,
                None => {
                    self.focus = Some(record.image_id.clone());
                    self.images.push(record);
                }
            },
            LogEvent::Focus(change) => self.focus = Some(change.image_id),
        }
    }

    pub fn apply(&mut self, event: LogEvent) -> Result<(), SessionError> {
        self.check(&event)?;
        self.commit(event);
        Ok(())
    }
}
