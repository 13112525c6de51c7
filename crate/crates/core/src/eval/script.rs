//! Scripted conversations replayed through the real turn engine.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::EvalError;
use crate::config::ServiceConfig;
use crate::engine::{Orchestrator, TurnEvent};
use crate::llm::{EchoLlm, LlmClient, OpenAiClient, ScriptedLlm};
use crate::router::GenerationKind;
use crate::session::{ImageId, ImageRecord, ImageStatus, Role, SessionId, SessionStore};

/// The interaction types a script can claim to exercise.
pub const INTERACTION_TYPES: [&str; 6] = [
    "generation",
    "referring_generation",
    "selecting",
    "editing",
    "refinement",
    "question_answering",
];

const BUNDLED: [(&str, &str); 6] = [
    ("fig6_hedgehog", include_str!("../../data/scripts/fig6_hedgehog.json")),
    ("dog_cat", include_str!("../../data/scripts/dog_cat.json")),
    ("selecting", include_str!("../../data/scripts/selecting.json")),
    ("refinement_upscale", include_str!("../../data/scripts/refinement_upscale.json")),
    ("storytelling", include_str!("../../data/scripts/storytelling.json")),
    ("qa_only", include_str!("../../data/scripts/qa_only.json")),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum LlmMode {
    /// One canned assistant output per turn.
    Scripted { outputs: Vec<String> },
    /// The configured LLM endpoint.
    Live,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Assertion {
    /// This many images generated in the turn, all of them ready.
    ExpectImages(usize),
    /// The turn's first image is an edit or refinement of the image with this ordinal.
    ExpectEditParent(u32),
    ExpectNoImages,
    /// Substring of the turn's visible text or image descriptions.
    ExpectTextContains(String),
    /// Ordinal of the focused image after the turn.
    ExpectFocus(u32),
    /// Generation kind of the turn's first image.
    ExpectKind(GenerationKind),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptTurn {
    pub user_text: String,
    #[serde(default)]
    pub assertions: Vec<Assertion>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Script {
    pub name: String,
    #[serde(default)]
    pub covers: Vec<String>,
    pub llm: LlmMode,
    /// Merged over the base service config.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<Value>,
    pub turns: Vec<ScriptTurn>,
}

impl Script {
    pub fn parse(text: &str, origin: &str) -> Result<Self, EvalError> {
        let script: Script = serde_json::from_str(text).map_err(|e| EvalError::ScriptParse {
            origin: origin.to_string(),
            line: e.line(),
            reason: e.to_string(),
        })?;
        script.validate(origin)?;
        Ok(script)
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    fn validate(&self, origin: &str) -> Result<(), EvalError> {
        let fail = |reason: String| EvalError::ScriptParse {
            origin: origin.to_string(),
            line: 0,
            reason,
        };
        if SessionId::parse(&format!("script-{}", self.name)).is_none() {
            return Err(fail(format!("script name {:?} must be a plain identifier", self.name)));
        }
        if self.turns.is_empty() {
            return Err(fail("script has no turns".into()));
        }
        if let LlmMode::Scripted { outputs } = &self.llm {
            if outputs.len() != self.turns.len() {
                return Err(fail(format!(
                    "{} canned outputs for {} turns",
                    outputs.len(),
                    self.turns.len()
                )));
            }
        }
        if let Some(tag) = self.covers.iter().find(|t| !INTERACTION_TYPES.contains(&t.as_str())) {
            return Err(fail(format!("unknown coverage tag {tag:?}")));
        }
        Ok(())
    }
}

pub fn bundled_scripts() -> Vec<Script> {
    BUNDLED
        .iter()
        .map(|(name, text)| Script::parse(text, name).expect("bundled scripts are valid"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssertionResult {
    pub assertion: Assertion,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TurnReport {
    /// 1-based.
    pub turn: usize,
    pub user_text: String,
    pub events: Vec<TurnEvent>,
    pub assertions: Vec<AssertionResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScriptReport {
    pub name: String,
    pub covers: Vec<String>,
    pub session_id: SessionId,
    pub passed: bool,
    pub turns: Vec<TurnReport>,
}

impl ScriptReport {
    /// `script:turn N:assertion` for every failed assertion.
    pub fn failures(&self) -> Vec<String> {
        self.turns
            .iter()
            .flat_map(|t| {
                t.assertions
                    .iter()
                    .filter(|a| !a.passed)
                    .map(move |a| format!("{}: turn {}: {:?}: {}", self.name, t.turn, a.assertion, a.detail))
            })
            .collect()
    }

    /// Every image request made, in order: (ordinal, kind, parent ordinal).
    pub fn generations(&self) -> Vec<(u32, GenerationKind, Option<u32>)> {
        let mut out = Vec::new();
        for turn in &self.turns {
            for event in &turn.events {
                if let TurnEvent::ImagePending { image_id, kind, .. } = event {
                    let parent = turn.events.iter().find_map(|e| match e {
                        TurnEvent::ImageReady {
                            image_id: id,
                            parent_id,
                            ..
                        } if id == image_id => Some(parent_id.as_ref().map(ordinal_of)),
                        _ => None,
                    });
                    out.push((ordinal_of(image_id), *kind, parent.flatten()));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub scripts: Vec<ScriptReport>,
    pub passed: usize,
    pub total: usize,
    /// Interaction types exercised by passing scripts.
    pub covered: Vec<String>,
}

impl SuiteReport {
    pub fn coverage(&self) -> (usize, usize) {
        (self.covered.len(), INTERACTION_TYPES.len())
    }
}

pub fn ordinal_of(id: &ImageId) -> u32 {
    id.as_str()
        .rsplit_once("-i")
        .and_then(|(_, n)| n.parse().ok())
        .unwrap_or(0)
}

fn merge(base: &mut Value, overlay: &Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o.clone(),
    }
}

/// Effective config for a script run.
pub fn script_config(script: &Script, base: &ServiceConfig) -> Result<ServiceConfig, EvalError> {
    let mut value = serde_json::to_value(base).expect("config serializes");
    if let Some(overlay) = &script.config {
        merge(&mut value, overlay);
    }
    let mut config: ServiceConfig =
        serde_json::from_value(value).map_err(|e| EvalError::Config(format!("{}: {e}", script.name)))?;
    if matches!(script.llm, LlmMode::Scripted { .. }) {
        // canned runs must not depend on a second LLM round
        config.refine.enabled = false;
    }
    config.validate().map_err(|e| EvalError::Config(format!("{}: {e}", script.name)))?;
    Ok(config)
}

/// Replays `script` in a fresh session `script-<name>` stored under `root`.
pub async fn run_script(script: &Script, base: &ServiceConfig, root: &Path) -> Result<ScriptReport, EvalError> {
    let config = script_config(script, base)?;
    let (chat, refiner): (Arc<dyn LlmClient>, Arc<dyn LlmClient>) = match &script.llm {
        LlmMode::Scripted { outputs } => (Arc::new(ScriptedLlm::new(outputs.clone())), Arc::new(EchoLlm)),
        LlmMode::Live => {
            let client: Arc<dyn LlmClient> =
                Arc::new(OpenAiClient::new(config.llm.clone()).map_err(|e| EvalError::Config(e.to_string()))?);
            (client.clone(), client)
        }
    };
    let store = Arc::new(SessionStore::open(root).map_err(|e| EvalError::Io(e.to_string()))?);
    let engine = Orchestrator::new(store.clone(), config, chat, refiner);
    let session_id = SessionId::parse(&format!("script-{}", script.name)).expect("validated name");
    engine
        .create_session_with_id(session_id.clone())
        .map_err(|e| EvalError::Io(e.to_string()))?;

    let mut turns = Vec::new();
    for (i, turn) in script.turns.iter().enumerate() {
        let handle = engine
            .run_turn(&session_id, &turn.user_text)
            .map_err(|e| EvalError::Io(e.to_string()))?;
        let events = handle.collect().await;
        let session = store.get(&session_id).map_err(|e| EvalError::Io(e.to_string()))?;
        let assistant_text = session
            .messages
            .iter()
            .rev()
            .find(|m| m.role == Role::Assistant)
            .map(|m| m.visible_text())
            .unwrap_or_default();
        let images: Vec<&ImageRecord> = events
            .iter()
            .filter_map(|e| match e {
                TurnEvent::ImagePending { image_id, .. } => session.image(image_id),
                _ => None,
            })
            .collect();
        let focus = session.focus.as_ref().map(ordinal_of);
        let assertions = turn
            .assertions
            .iter()
            .map(|a| evaluate(a, &images, &assistant_text, focus))
            .collect();
        turns.push(TurnReport {
            turn: i + 1,
            user_text: turn.user_text.clone(),
            events,
            assertions,
        });
    }
    let passed = turns.iter().all(|t| t.assertions.iter().all(|a| a.passed));
    Ok(ScriptReport {
        name: script.name.clone(),
        covers: script.covers.clone(),
        session_id,
        passed,
        turns,
    })
}

fn evaluate(assertion: &Assertion, images: &[&ImageRecord], text: &str, focus: Option<u32>) -> AssertionResult {
    let ready = images.iter().filter(|i| i.status == ImageStatus::Ready).count();
    let first = images.first();
    let (passed, detail) = match assertion {
        Assertion::ExpectImages(n) => (
            images.len() == *n && ready == *n,
            format!("{} images, {ready} ready", images.len()),
        ),
        Assertion::ExpectNoImages => (images.is_empty(), format!("{} images", images.len())),
        Assertion::ExpectEditParent(ordinal) => match first {
            Some(img) => {
                let parent = img.parent_id.as_ref().map(ordinal_of);
                (
                    img.kind != GenerationKind::New && parent == Some(*ordinal),
                    format!("first image kind {:?}, parent {parent:?}", img.kind),
                )
            }
            None => (false, "no images".into()),
        },
        Assertion::ExpectTextContains(needle) => {
            let haystack: String = std::iter::once(text.to_string())
                .chain(images.iter().map(|i| i.description.clone()))
                .collect::<Vec<_>>()
                .join("\n");
            (haystack.contains(needle.as_str()), format!("text {:?}", excerpt(&haystack)))
        }
        Assertion::ExpectFocus(ordinal) => (focus == Some(*ordinal), format!("focus {focus:?}")),
        Assertion::ExpectKind(kind) => match first {
            Some(img) => (img.kind == *kind, format!("kind {:?}", img.kind)),
            None => (false, "no images".into()),
        },
    };
    AssertionResult {
        assertion: assertion.clone(),
        passed,
        detail,
    }
}

fn excerpt(text: &str) -> String {
    text.chars().take(80).collect()
}

/// Runs each script in its own directory under `root`.
pub async fn run_all(scripts: &[Script], base: &ServiceConfig, root: &Path) -> Result<SuiteReport, EvalError> {
    let mut reports = Vec::new();
    for script in scripts {
        reports.push(run_script(script, base, &root.join(&script.name)).await?);
    }
    let covered: BTreeSet<String> = reports
        .iter()
        .filter(|r| r.passed)
        .flat_map(|r| r.covers.iter().cloned())
        .collect();
    let passed = reports.iter().filter(|r| r.passed).count();
    Ok(SuiteReport {
        total: reports.len(),
        passed,
        covered: INTERACTION_TYPES
            .iter()
            .filter(|t| covered.contains(**t))
            .map(|t| t.to_string())
            .collect(),
        scripts: reports,
    })
}
