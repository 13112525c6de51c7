//! Runs one chat turn end to end.
//!
//! A turn is a single task joining two futures: the reader streams the LLM
//! reply through the tag parser and router, and the worker renders planned
//! images one at a time in tag order. The reader records each image as
//! pending as soon as its tag closes, so rendering overlaps with streaming.
//! Every event is persisted before it is sent.

use std::collections::HashSet;
use std::sync::{Arc, Mutex};

use futures::StreamExt;
use serde::Serialize;
use thiserror::Error;
use tokio::sync::mpsc;
use tokio::task::JoinHandle;

use crate::backends::{BackendError, BackendRegistry};
use crate::config::ServiceConfig;
use crate::llm::{assemble_context, LlmClient};
use crate::protocol::TagParser;
use crate::router::{adapt, GenerationKind, Plan, PlannedGeneration, TurnRouter};
use crate::session::{
    ImageId, ImageRecord, ImageStatus, MessageId, Role, Segment, Session, SessionError, SessionId, SessionStore,
};

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TurnEvent {
    TextDelta {
        message_id: MessageId,
        delta: String,
    },
    ImagePending {
        image_id: ImageId,
        kind: GenerationKind,
        description: String,
    },
    ImageReady {
        image_id: ImageId,
        url: String,
        seed: u64,
        parent_id: Option<ImageId>,
        backend: String,
    },
    ImageFailed {
        image_id: ImageId,
        code: String,
        detail: String,
    },
    FocusChanged {
        image_id: ImageId,
    },
    TurnCompleted {
        message_id: MessageId,
    },
    Error {
        code: String,
        detail: String,
    },
}

impl TurnEvent {
    pub fn name(&self) -> &'static str {
        match self {
            TurnEvent::TextDelta { .. } => "text_delta",
            TurnEvent::ImagePending { .. } => "image_pending",
            TurnEvent::ImageReady { .. } => "image_ready",
            TurnEvent::ImageFailed { .. } => "image_failed",
            TurnEvent::FocusChanged { .. } => "focus_changed",
            TurnEvent::TurnCompleted { .. } => "turn_completed",
            TurnEvent::Error { .. } => "error",
        }
    }

    fn error(code: &str, detail: impl ToString) -> Self {
        TurnEvent::Error {
            code: code.to_string(),
            detail: detail.to_string(),
        }
    }
}

pub fn image_url(id: &ImageId) -> String {
    format!("/v1/images/{id}")
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("session {0} not found")]
    NotFound(SessionId),
    #[error("a turn is already running for session {0}")]
    TurnInFlight(SessionId),
    #[error("message text is empty")]
    EmptyMessage,
    #[error(transparent)]
    Session(#[from] SessionError),
}

/// A running turn. Dropping the handle does not stop the turn; `abort` does.
pub struct TurnHandle {
    pub user_message_id: MessageId,
    pub events: mpsc::UnboundedReceiver<TurnEvent>,
    pub task: JoinHandle<()>,
}

impl TurnHandle {
    /// Waits for the turn to finish and returns every event in order.
    pub async fn collect(mut self) -> Vec<TurnEvent> {
        let mut out = Vec::new();
        while let Some(event) = self.events.recv().await {
            out.push(event);
        }
        out
    }
}

pub struct Orchestrator {
    store: Arc<SessionStore>,
    config: ServiceConfig,
    chat: Arc<dyn LlmClient>,
    refiner: Arc<dyn LlmClient>,
    registry: Arc<BackendRegistry>,
    in_flight: Arc<Mutex<HashSet<SessionId>>>,
}

struct InFlightGuard {
    set: Arc<Mutex<HashSet<SessionId>>>,
    id: SessionId,
}

impl Drop for InFlightGuard {
    fn drop(&mut self) {
        self.set.lock().unwrap().remove(&self.id);
    }
}

impl Orchestrator {
    /// `chat` answers the user; `refiner` rewrites image descriptions.
    pub fn new(
        store: Arc<SessionStore>,
        config: ServiceConfig,
        chat: Arc<dyn LlmClient>,
        refiner: Arc<dyn LlmClient>,
    ) -> Self {
        let registry = Arc::new(BackendRegistry::new(config.backends.clone()));
        Self {
            store,
            config,
            chat,
            refiner,
            registry,
            in_flight: Arc::new(Mutex::new(HashSet::new())),
        }
    }

    pub fn store(&self) -> &Arc<SessionStore> {
        &self.store
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn registry(&self) -> &Arc<BackendRegistry> {
        &self.registry
    }

    pub fn create_session(&self) -> Result<Session, SessionError> {
        self.store.create_session(&self.config)
    }

    pub fn create_session_with_id(&self, id: SessionId) -> Result<Session, SessionError> {
        self.store.create_session_with_id(id, &self.config)
    }

    pub fn image_bytes(&self, image_id: &ImageId) -> Result<Option<Vec<u8>>, SessionError> {
        let record = self.store.find_image(image_id)?;
        match record.content_digest {
            Some(digest) => Ok(Some(self.store.read_image_bytes(&digest)?)),
            None => Ok(None),
        }
    }

    pub fn is_turn_running(&self, id: &SessionId) -> bool {
        self.in_flight.lock().unwrap().contains(id)
    }

    /// Persists the user message and starts the assistant turn.
    pub fn run_turn(&self, session_id: &SessionId, user_text: &str) -> Result<TurnHandle, EngineError> {
        if user_text.trim().is_empty() {
            return Err(EngineError::EmptyMessage);
        }
        match self.store.get(session_id) {
            Ok(_) => {}
            Err(SessionError::NotFound(id)) => return Err(EngineError::NotFound(id)),
            Err(e) => return Err(e.into()),
        }
        if !self.in_flight.lock().unwrap().insert(session_id.clone()) {
            return Err(EngineError::TurnInFlight(session_id.clone()));
        }
        let guard = InFlightGuard {
            set: self.in_flight.clone(),
            id: session_id.clone(),
        };
        let user_message_id = self.store.append_message(
            session_id,
            Role::User,
            vec![Segment::Text(user_text.to_string())],
            None,
        )?;
        let session = self.store.get(session_id)?;

        let (tx, events) = mpsc::unbounded_channel();
        let turn = Turn {
            _guard: guard,
            store: self.store.clone(),
            chat: self.chat.clone(),
            refiner: self.refiner.clone(),
            registry: self.registry.clone(),
            tx,
        };
        let task = tokio::spawn(turn.run(session));
        Ok(TurnHandle {
            user_message_id,
            events,
            task,
        })
    }
}

struct Turn {
    // declared first so it drops before `tx`: once the event channel closes,
    // the session already accepts a new turn
    _guard: InFlightGuard,
    store: Arc<SessionStore>,
    chat: Arc<dyn LlmClient>,
    refiner: Arc<dyn LlmClient>,
    registry: Arc<BackendRegistry>,
    tx: mpsc::UnboundedSender<TurnEvent>,
}

/// Text and image segments of the assistant message under construction.
#[derive(Default)]
struct Segments(Vec<Segment>);

impl Segments {
    fn push_text(&mut self, text: &str) {
        if let Some(Segment::Text(last)) = self.0.last_mut() {
            last.push_str(text);
        } else {
            self.0.push(Segment::Text(text.to_string()));
        }
    }
}

impl Turn {
    fn emit(&self, event: TurnEvent) {
        // a closed receiver only means nobody is listening
        let _ = self.tx.send(event);
    }

    async fn run(self, session: Session) {
        let session_id = session.session_id.clone();
        let config = session.config_snapshot.clone();
        let message_id = session.next_message_id();
        let context = assemble_context(&session, &config.prompt);
        let mut router = TurnRouter::new(&session, &config.policy, &config.routing, self.registry.specs());
        drop(session);

        let (job_tx, mut job_rx) = mpsc::unbounded_channel::<PlannedGeneration>();

        let reader = async {
            let mut raw = String::new();
            let mut segments = Segments::default();
            let mut stream = match self.chat.complete_stream(&context).await {
                Ok(s) => s,
                Err(e) => {
                    self.emit(TurnEvent::error(e.code(), &e));
                    return (raw, segments);
                }
            };
            if stream.retries > 0 {
                tracing::info!(session = %session_id, retries = stream.retries, "LLM stream opened after retries");
            }
            let mut parser = TagParser::new();
            let mut failed = false;
            while let Some(chunk) = stream.next().await {
                match chunk {
                    Ok(text) => {
                        raw.push_str(&text);
                        for event in parser.feed(&text) {
                            for plan in router.plan(&event) {
                                self.apply_plan(plan, &session_id, &message_id, &mut segments, &job_tx);
                            }
                        }
                    }
                    Err(e) => {
                        self.emit(TurnEvent::error(e.code(), &e));
                        failed = true;
                        break;
                    }
                }
            }
            if !failed {
                for event in parser.finalize() {
                    for plan in router.plan(&event) {
                        self.apply_plan(plan, &session_id, &message_id, &mut segments, &job_tx);
                    }
                }
            }
            drop(job_tx);
            (raw, segments)
        };

        let worker = async {
            while let Some(job) = job_rx.recv().await {
                self.render(&session_id, job, &config.refine).await;
            }
        };

        let ((raw, segments), ()) = tokio::join!(reader, worker);

        match self.store.append_message(&session_id, Role::Assistant, segments.0, Some(raw)) {
            Ok(id) => debug_assert_eq!(id, message_id),
            Err(e) => self.emit(TurnEvent::error("storage_error", e)),
        }
        self.emit(TurnEvent::TurnCompleted { message_id });
    }

    fn apply_plan(
        &self,
        plan: Plan,
        session_id: &SessionId,
        message_id: &MessageId,
        segments: &mut Segments,
        jobs: &mpsc::UnboundedSender<PlannedGeneration>,
    ) {
        match plan {
            Plan::Text(text) => {
                segments.push_text(&text);
                self.emit(TurnEvent::TextDelta {
                    message_id: message_id.clone(),
                    delta: text,
                });
            }
            Plan::Generate(planned) => {
                let record = pending_record(&planned);
                match self.store.record_image(session_id, record) {
                    Ok(image_id) => {
                        segments.0.push(Segment::Image(image_id.clone()));
                        self.emit(TurnEvent::ImagePending {
                            image_id,
                            kind: planned.kind,
                            description: planned.description.clone(),
                        });
                        let _ = jobs.send(planned);
                    }
                    Err(e) => self.emit(TurnEvent::error("storage_error", e)),
                }
            }
            Plan::Focus(image_id) => match self.store.set_focus(session_id, &image_id) {
                Ok(()) => self.emit(TurnEvent::FocusChanged { image_id }),
                Err(e) => self.emit(TurnEvent::error("storage_error", e)),
            },
            Plan::SelectionEcho(index) => {
                let echo = format!("[selected image {index}]");
                segments.push_text(&echo);
                self.emit(TurnEvent::TextDelta {
                    message_id: message_id.clone(),
                    delta: echo,
                });
            }
            Plan::Error(e) => self.emit(TurnEvent::error(e.code(), e)),
        }
    }

    async fn render(&self, session_id: &SessionId, planned: PlannedGeneration, refine: &crate::adapter::RefineConfig) {
        let image_id = planned.image_id.clone();
        let mut record = pending_record(&planned);

        let parent_bytes = match &planned.parent_id {
            None => Ok(None),
            Some(parent) => self.parent_bytes(parent).map(Some),
        };
        let parent_bytes = match parent_bytes {
            Ok(bytes) => bytes,
            Err(detail) => return self.fail(session_id, record, "parent_unavailable", detail),
        };

        let request = match adapt(planned, refine, self.refiner.as_ref()).await {
            Ok(r) => r,
            Err(e) => return self.fail(session_id, record, "refine_failed", e.to_string()),
        };
        record.refined_prompt = request.refined.positive.clone();
        record.negative_prompt = request.refined.negative.clone();
        record.variation_hint = request.refined.variation_hint.clone();
        record.notes = request.notes.clone();

        let result = self
            .registry
            .generate(&request.backend_name, &request, parent_bytes.as_deref())
            .await;
        let result = match result {
            Ok(r) => r,
            Err(e) => return self.fail_backend(session_id, record, e),
        };
        let digest = match self.store.put_image_bytes(&result.bytes) {
            Ok(d) => d,
            Err(e) => return self.fail(session_id, record, "storage_error", e.to_string()),
        };
        record.status = ImageStatus::Ready;
        record.content_digest = Some(digest);
        record.width = result.width;
        record.height = result.height;
        record.backend_name = result.backend_name.clone();
        let event = TurnEvent::ImageReady {
            image_id: image_id.clone(),
            url: image_url(&image_id),
            seed: record.seed,
            parent_id: record.parent_id.clone(),
            backend: result.backend_name,
        };
        match self.store.update_image(session_id, record) {
            Ok(()) => self.emit(event),
            Err(e) => self.emit(TurnEvent::error("storage_error", e)),
        }
    }

    fn parent_bytes(&self, parent: &ImageId) -> Result<Vec<u8>, String> {
        let record = self.store.find_image(parent).map_err(|e| e.to_string())?;
        match (record.status, record.content_digest) {
            (ImageStatus::Ready, Some(digest)) => self.store.read_image_bytes(&digest).map_err(|e| e.to_string()),
            (status, _) => Err(format!("parent image {parent} is {status:?}")),
        }
    }

    fn fail_backend(&self, session_id: &SessionId, record: ImageRecord, error: BackendError) {
        self.fail(session_id, record, error.code(), error.to_string())
    }

    fn fail(&self, session_id: &SessionId, mut record: ImageRecord, code: &str, detail: String) {
        tracing::warn!(image = %record.image_id, code, %detail, "image generation failed");
        let image_id = record.image_id.clone();
        record.status = ImageStatus::Failed;
        record.content_digest = None;
        record.error = Some(format!("{code}: {detail}"));
        match self.store.update_image(session_id, record) {
            Ok(()) => self.emit(TurnEvent::ImageFailed {
                image_id,
                code: code.to_string(),
                detail,
            }),
            Err(e) => self.emit(TurnEvent::error("storage_error", e)),
        }
    }
}

/// Record written when a tag closes, before refinement and rendering.
fn pending_record(planned: &PlannedGeneration) -> ImageRecord {
    ImageRecord {
        image_id: planned.image_id.clone(),
        ordinal: planned.ordinal,
        tag_kind: planned.tag_kind,
        kind: planned.kind,
        description: planned.description.clone(),
        refined_prompt: String::new(),
        negative_prompt: String::new(),
        seed: planned.seed,
        parent_id: planned.parent_id.clone(),
        backend_name: planned.backend_name.clone(),
        width: planned.width,
        height: planned.height,
        content_digest: None,
        status: ImageStatus::Pending,
        downgraded_from_edit: planned.downgraded_from_edit,
        change_class: planned.change_class,
        variation_hint: None,
        batch: planned.batch,
        notes: planned.notes.clone(),
        error: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn event_wire_shape() {
        let sid = SessionId::parse("s").unwrap();
        let event = TurnEvent::ImageReady {
            image_id: ImageId::new(&sid, 1),
            url: image_url(&ImageId::new(&sid, 1)),
            seed: 9,
            parent_id: None,
            backend: "mock".into(),
        };
        assert_eq!(event.name(), "image_ready");
        assert_eq!(
            serde_json::to_string(&event).unwrap(),
            r#"{"type":"image_ready","image_id":"s-i1","url":"/v1/images/s-i1","seed":9,"parent_id":null,"backend":"mock"}"#
        );
    }
}
