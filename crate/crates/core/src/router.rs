//! Turns parsed LLM output into actions: text, image generations, focus changes.
//!
//! Routing happens in two steps. [`TurnRouter::plan`] is synchronous and
//! decides everything that depends on session state (kind, parent, seed,
//! backend, size). [`adapt`] then runs the async prompt refinement. The
//! engine interleaves both with streaming; [`route_turn`] runs them back to
//! back over a finished event list.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::adapter::{refine_variant, AdapterError, RefineConfig, RefinedPrompt};
use crate::backends::{BackendSpec, Capability};
use crate::llm::LlmClient;
use crate::protocol::{StreamEvent, TagKind};
use crate::session::{ImageId, ImageRecord, ImageStatus, Role, Session, SessionId};

pub const MAX_DIMENSION: u32 = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationKind {
    New,
    Edit,
    RefineUpscale,
}

impl GenerationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            GenerationKind::New => "new",
            GenerationKind::Edit => "edit",
            GenerationKind::RefineUpscale => "refine_upscale",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChangeClass {
    Small,
    Large,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConsistencyPolicy {
    pub containment_threshold: f64,
}

impl Default for ConsistencyPolicy {
    fn default() -> Self {
        Self {
            containment_threshold: 0.6,
        }
    }
}

impl ConsistencyPolicy {
    pub fn validate(&self) -> Result<(), String> {
        let t = self.containment_threshold;
        if t > 0.0 && t <= 1.0 {
            Ok(())
        } else {
            Err(format!("policy.containment_threshold must be in (0, 1], got {t}"))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoutingConfig {
    /// Images generated per `<image>` tag; more than one fans out into variations.
    pub variations_per_tag: u32,
    /// An `<edit>` whose user request contains one of these words becomes a
    /// refine-upscale of the focused image.
    pub refine_keywords: Vec<String>,
    /// Edits and refinements reuse the parent's seed.
    pub inherit_seed_on_edit: bool,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        Self {
            variations_per_tag: 1,
            refine_keywords: ["refine", "enhance", "upscale", "sharpen", "polish"]
                .map(String::from)
                .to_vec(),
            inherit_seed_on_edit: true,
        }
    }
}

impl RoutingConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(1..=16).contains(&self.variations_per_tag) {
            return Err("routing.variations_per_tag must be between 1 and 16".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub image_id: ImageId,
    pub ordinal: u32,
    pub kind: GenerationKind,
    pub tag_kind: TagKind,
    pub description: String,
    pub refined: RefinedPrompt,
    pub parent_id: Option<ImageId>,
    pub seed: u64,
    pub width: u32,
    pub height: u32,
    pub change_class: Option<ChangeClass>,
    pub backend_name: String,
    pub downgraded_from_edit: bool,
    pub batch: u32,
    pub notes: Vec<String>,
}

impl GenerationRequest {
    /// The record persisted before generation starts.
    pub fn pending_record(&self) -> ImageRecord {
        ImageRecord {
            image_id: self.image_id.clone(),
            ordinal: self.ordinal,
            tag_kind: self.tag_kind,
            kind: self.kind,
            description: self.description.clone(),
            refined_prompt: self.refined.positive.clone(),
            negative_prompt: self.refined.negative.clone(),
            seed: self.seed,
            parent_id: self.parent_id.clone(),
            backend_name: self.backend_name.clone(),
            width: self.width,
            height: self.height,
            content_digest: None,
            status: ImageStatus::Pending,
            downgraded_from_edit: self.downgraded_from_edit,
            change_class: self.change_class,
            variation_hint: self.refined.variation_hint.clone(),
            batch: self.batch,
            notes: self.notes.clone(),
            error: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum RouteError {
    #[error("no backend registered")]
    NoBackendAvailable,
    #[error("select index {index} out of range (latest batch has {available} images)")]
    SelectIndexOutOfRange { index: u32, available: usize },
}

impl RouteError {
    pub fn code(&self) -> &'static str {
        match self {
            RouteError::NoBackendAvailable => "no_backend",
            RouteError::SelectIndexOutOfRange { .. } => "select_out_of_range",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Action {
    EmitText(String),
    Generate(GenerationRequest),
    SetFocus(ImageId),
    EmitSelectionEcho(u32),
    /// A routing problem that does not end the turn.
    Error(RouteError),
}

/// Lowercased words with leading/trailing punctuation stripped.
pub fn tokenize(text: &str) -> BTreeSet<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

/// `|W(parent) ∩ W(new)|` and `|W(parent)|`.
pub fn containment(parent_prompt: &str, new_description: &str) -> (usize, usize) {
    let parent = tokenize(parent_prompt);
    let new = tokenize(new_description);
    (parent.intersection(&new).count(), parent.len())
}

pub fn classify_change(parent_prompt: &str, new_description: &str, policy: &ConsistencyPolicy) -> ChangeClass {
    let (shared, total) = containment(parent_prompt, new_description);
    if total > 0 && shared as f64 / total as f64 >= policy.containment_threshold {
        ChangeClass::Small
    } else {
        ChangeClass::Large
    }
}

pub fn required_capability(kind: GenerationKind, change: Option<ChangeClass>) -> Capability {
    match (kind, change) {
        (GenerationKind::New, _) => Capability::Txt2Img,
        (GenerationKind::Edit, Some(ChangeClass::Small)) => Capability::TextEdit,
        (GenerationKind::Edit, _) => Capability::ImagePrompt,
        (GenerationKind::RefineUpscale, _) => Capability::Upscale,
    }
}

/// First registered backend offering the required capability, falling back
/// to image-prompt and then txt2img. The note describes any fallback taken.
pub fn select_backend(
    change: Option<ChangeClass>,
    kind: GenerationKind,
    registry: &[BackendSpec],
) -> Result<(&BackendSpec, Option<String>), RouteError> {
    let first = registry.first().ok_or(RouteError::NoBackendAvailable)?;
    let required = required_capability(kind, change);
    let mut chain = vec![required];
    for cap in [Capability::ImagePrompt, Capability::Txt2Img] {
        if !chain.contains(&cap) {
            chain.push(cap);
        }
    }
    for cap in &chain {
        if let Some(spec) = registry.iter().find(|b| b.capabilities.contains(cap)) {
            let note = (*cap != required).then(|| {
                format!("no backend offers {required}; using {} via {cap}", spec.name)
            });
            return Ok((spec, note));
        }
    }
    Ok((
        first,
        Some(format!("no backend offers {required}; using {} as last resort", first.name)),
    ))
}

/// Low 64 bits of SHA-256 over the session id followed by the big-endian ordinal.
pub fn seed_for(session_id: &SessionId, ordinal: u32) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(session_id.as_str().as_bytes());
    hasher.update(ordinal.to_be_bytes());
    let digest = hasher.finalize();
    u64::from_be_bytes(digest[24..32].try_into().expect("8 bytes"))
}

pub fn assign_seed(
    session_id: &SessionId,
    ordinal: u32,
    kind: GenerationKind,
    parent_seed: Option<u64>,
    routing: &RoutingConfig,
) -> u64 {
    match (kind, parent_seed) {
        (GenerationKind::Edit | GenerationKind::RefineUpscale, Some(seed)) if routing.inherit_seed_on_edit => seed,
        _ => seed_for(session_id, ordinal),
    }
}

/// How the adapter should treat a planned generation's description.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variation {
    None,
    /// 1-based hint index.
    Hint(usize),
}

/// A generation decided by the router, waiting for prompt refinement.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannedGeneration {
    pub image_id: ImageId,
    pub ordinal: u32,
    pub kind: GenerationKind,
    pub tag_kind: TagKind,
    pub description: String,
    pub variation: Variation,
    pub parent_id: Option<ImageId>,
    pub seed: u64,
    pub width: u32,
    pub height: u32,
    pub change_class: Option<ChangeClass>,
    pub backend_name: String,
    pub downgraded_from_edit: bool,
    pub batch: u32,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Plan {
    Text(String),
    Generate(PlannedGeneration),
    Focus(ImageId),
    SelectionEcho(u32),
    Error(RouteError),
}

#[derive(Debug, Clone)]
struct KnownImage {
    id: ImageId,
    prompt: String,
    seed: u64,
    width: u32,
    height: u32,
    batch: u32,
}

/// Per-turn router state, seeded from the session as it stood when the turn began.
#[derive(Debug)]
pub struct TurnRouter {
    session_id: SessionId,
    policy: ConsistencyPolicy,
    routing: RoutingConfig,
    registry: Vec<BackendSpec>,
    user_words: BTreeSet<String>,
    batch: u32,
    images: Vec<KnownImage>,
    focus: Option<ImageId>,
    planned_this_turn: Vec<ImageId>,
    descriptions_seen: HashMap<String, usize>,
    raw_tag: String,
}

impl TurnRouter {
    /// `session` must already contain the user message that started the turn.
    pub fn new(session: &Session, policy: &ConsistencyPolicy, routing: &RoutingConfig, registry: &[BackendSpec]) -> Self {
        let user_text = session
            .messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.visible_text())
            .unwrap_or_default();
        let batch = session.messages.iter().filter(|m| m.role == Role::User).count().max(1) as u32;
        Self {
            session_id: session.session_id.clone(),
            policy: policy.clone(),
            routing: routing.clone(),
            registry: registry.to_vec(),
            user_words: tokenize(&user_text),
            batch,
            images: session.images.iter().map(known).collect(),
            focus: session.focus.clone(),
            planned_this_turn: Vec::new(),
            descriptions_seen: HashMap::new(),
            raw_tag: String::new(),
        }
    }

    pub fn focus(&self) -> Option<&ImageId> {
        self.focus.as_ref()
    }

    pub fn plan(&mut self, event: &StreamEvent) -> Vec<Plan> {
        match event {
            StreamEvent::TextDelta(text) => vec![Plan::Text(text.clone())],
            StreamEvent::TagOpen(kind) => {
                self.raw_tag = kind.open_token().to_string();
                Vec::new()
            }
            StreamEvent::DescDelta(_, delta) => {
                self.raw_tag.push_str(delta);
                Vec::new()
            }
            StreamEvent::TagClose {
                kind,
                full_description,
                implicit,
            } => {
                let mut raw = std::mem::take(&mut self.raw_tag);
                if !implicit {
                    raw.push_str(kind.close_token());
                }
                match kind {
                    TagKind::Select => self.plan_select(full_description),
                    _ if full_description.trim().is_empty() => vec![Plan::Text(raw)],
                    TagKind::Image => self.plan_image(full_description),
                    TagKind::Edit => self.plan_edit(full_description),
                }
            }
        }
    }

    fn plan_image(&mut self, description: &str) -> Vec<Plan> {
        let per_tag = self.routing.variations_per_tag.max(1) as usize;
        let key = description.trim().to_lowercase();
        let occurrence = {
            let seen = self.descriptions_seen.entry(key).or_insert(0);
            *seen += 1;
            *seen
        };
        (0..per_tag)
            .map(|i| {
                let variation = if per_tag > 1 {
                    Variation::Hint(i + 1)
                } else if occurrence > 1 {
                    Variation::Hint(occurrence)
                } else {
                    Variation::None
                };
                Plan::Generate(self.push_generation(
                    GenerationKind::New,
                    TagKind::Image,
                    description,
                    variation,
                    None,
                    false,
                ))
            })
            .collect()
    }

    fn plan_edit(&mut self, description: &str) -> Vec<Plan> {
        let parent = self
            .focus
            .as_ref()
            .and_then(|id| self.images.iter().find(|img| &img.id == id))
            .cloned();
        let Some(parent) = parent else {
            return vec![Plan::Generate(self.push_generation(
                GenerationKind::New,
                TagKind::Edit,
                description,
                Variation::None,
                None,
                true,
            ))];
        };
        let wants_refine = self.routing.refine_keywords.iter().any(|k| self.user_words.contains(&k.to_lowercase()));
        let kind = if wants_refine {
            GenerationKind::RefineUpscale
        } else {
            GenerationKind::Edit
        };
        vec![Plan::Generate(self.push_generation(
            kind,
            TagKind::Edit,
            description,
            Variation::None,
            Some(parent),
            false,
        ))]
    }

    fn plan_select(&mut self, content: &str) -> Vec<Plan> {
        let Some(index) = crate::protocol::parse_select_index(content) else {
            return vec![Plan::Text(format!("<select>{content}</select>"))];
        };
        let batch: Vec<ImageId> = if !self.planned_this_turn.is_empty() {
            self.planned_this_turn.clone()
        } else {
            let latest = self.images.iter().map(|i| i.batch).max();
            self.images
                .iter()
                .filter(|i| Some(i.batch) == latest)
                .map(|i| i.id.clone())
                .collect()
        };
        match batch.get(index as usize - 1) {
            Some(id) => {
                self.focus = Some(id.clone());
                vec![Plan::Focus(id.clone()), Plan::SelectionEcho(index)]
            }
            None => vec![Plan::Error(RouteError::SelectIndexOutOfRange {
                index,
                available: batch.len(),
            })],
        }
    }

    fn push_generation(
        &mut self,
        kind: GenerationKind,
        tag_kind: TagKind,
        description: &str,
        variation: Variation,
        parent: Option<KnownImage>,
        downgraded_from_edit: bool,
    ) -> PlannedGeneration {
        let ordinal = self.images.len() as u32 + 1;
        let image_id = ImageId::new(&self.session_id, ordinal);
        let change_class = match (&parent, kind) {
            (Some(p), GenerationKind::Edit) => Some(classify_change(&p.prompt, description, &self.policy)),
            _ => None,
        };
        let mut notes = Vec::new();
        if downgraded_from_edit {
            notes.push("edit requested with no prior image; generated a new image".to_string());
        }
        let (backend_name, default_size) = match select_backend(change_class, kind, &self.registry) {
            Ok((spec, note)) => {
                notes.extend(note);
                (spec.name.clone(), spec.default_size)
            }
            Err(e) => {
                notes.push(e.to_string());
                (String::new(), (512, 512))
            }
        };
        let (width, height) = match (&parent, kind) {
            (Some(p), GenerationKind::RefineUpscale) => {
                let (w, h) = (p.width.saturating_mul(2), p.height.saturating_mul(2));
                if w > MAX_DIMENSION || h > MAX_DIMENSION {
                    notes.push(format!("upscale clamped to {MAX_DIMENSION} pixels"));
                }
                (w.min(MAX_DIMENSION), h.min(MAX_DIMENSION))
            }
            (Some(p), _) => (p.width, p.height),
            (None, _) => default_size,
        };
        let seed = assign_seed(&self.session_id, ordinal, kind, parent.as_ref().map(|p| p.seed), &self.routing);
        let planned = PlannedGeneration {
            image_id: image_id.clone(),
            ordinal,
            kind,
            tag_kind,
            description: description.to_string(),
            variation,
            parent_id: parent.map(|p| p.id),
            seed,
            width,
            height,
            change_class,
            backend_name,
            downgraded_from_edit,
            batch: self.batch,
            notes,
        };
        self.images.push(KnownImage {
            id: image_id.clone(),
            prompt: description.trim().to_string(),
            seed,
            width,
            height,
            batch: self.batch,
        });
        self.planned_this_turn.push(image_id.clone());
        self.focus = Some(image_id);
        planned
    }
}

fn known(record: &ImageRecord) -> KnownImage {
    KnownImage {
        id: record.image_id.clone(),
        prompt: record.description.trim().to_string(),
        seed: record.seed,
        width: record.width,
        height: record.height,
        batch: record.batch,
    }
}

/// Runs the adapter on a planned generation.
pub async fn adapt(
    planned: PlannedGeneration,
    refine: &RefineConfig,
    llm: &dyn LlmClient,
) -> Result<GenerationRequest, AdapterError> {
    let variation = match planned.variation {
        Variation::None => None,
        Variation::Hint(i) => Some(i),
    };
    let refined = refine_variant(&planned.description, variation, refine, llm).await?;
    let mut notes = planned.notes;
    notes.extend(refined.warning.clone());
    Ok(GenerationRequest {
        image_id: planned.image_id,
        ordinal: planned.ordinal,
        kind: planned.kind,
        tag_kind: planned.tag_kind,
        description: planned.description,
        refined,
        parent_id: planned.parent_id,
        seed: planned.seed,
        width: planned.width,
        height: planned.height,
        change_class: planned.change_class,
        backend_name: planned.backend_name,
        downgraded_from_edit: planned.downgraded_from_edit,
        batch: planned.batch,
        notes,
    })
}

/// Routes one complete assistant turn.
pub async fn route_turn(
    events: &[StreamEvent],
    session: &Session,
    policy: &ConsistencyPolicy,
    routing: &RoutingConfig,
    refine: &RefineConfig,
    llm: &dyn LlmClient,
    registry: &[BackendSpec],
) -> Vec<Action> {
    let mut router = TurnRouter::new(session, policy, routing, registry);
    let mut actions = Vec::new();
    for event in events {
        for plan in router.plan(event) {
            actions.push(match plan {
                Plan::Text(text) => Action::EmitText(text),
                Plan::Focus(id) => Action::SetFocus(id),
                Plan::SelectionEcho(index) => Action::EmitSelectionEcho(index),
                Plan::Error(e) => Action::Error(e),
                Plan::Generate(planned) => {
                    // plan() never yields an empty description
                    let fallback = planned.description.clone();
                    match adapt(planned, refine, llm).await {
                        Ok(request) => Action::Generate(request),
                        Err(_) => Action::EmitText(fallback),
                    }
                }
            });
        }
    }
    actions
}
