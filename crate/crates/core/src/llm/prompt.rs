//! The iT2I system prompt and conversation rendering.

use serde::{Deserialize, Serialize};

use super::ChatMessage;
use crate::session::{Role, Segment, Session};

const SYSTEM_PROMPT: &str = include_str!("../../data/system_prompt.txt");
const SELECT_EXTENSION: &str = include_str!("../../data/select_extension.txt");
const FEWSHOT: &str = include_str!("../../data/fewshot.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    #[serde(alias = "assistant")]
    Ai,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotTurn {
    pub role: Speaker,
    pub text: String,
}

pub type FewShotDialog = Vec<FewShotTurn>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptConfig {
    pub persona_name: String,
    /// `{persona}` is replaced with `persona_name`.
    pub base_instructions: String,
    pub fewshot_examples: Vec<FewShotDialog>,
    pub enable_select_extension: bool,
    /// Keep only this many most recent transcript messages in the context.
    pub max_history_messages: Option<usize>,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            persona_name: "Mini-DALLE3".to_string(),
            base_instructions: SYSTEM_PROMPT.trim_end().to_string(),
            fewshot_examples: parse_fewshot(FEWSHOT),
            enable_select_extension: false,
            max_history_messages: None,
        }
    }
}

/// Parses `User:` / `AI:` lines; `---` separates dialogs, `#` starts a comment.
pub fn parse_fewshot(text: &str) -> Vec<FewShotDialog> {
    let mut dialogs = vec![Vec::new()];
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line == "---" {
            dialogs.push(Vec::new());
            continue;
        }
        let dialog = dialogs.last_mut().expect("non-empty");
        if let Some(rest) = line.strip_prefix("User:") {
            dialog.push(FewShotTurn {
                role: Speaker::User,
                text: rest.trim().to_string(),
            });
        } else if let Some(rest) = line.strip_prefix("AI:") {
            dialog.push(FewShotTurn {
                role: Speaker::Ai,
                text: rest.trim().to_string(),
            });
        } else if let Some(turn) = dialog.last_mut() {
            turn.text.push('\n');
            turn.text.push_str(line);
        }
    }
    dialogs.retain(|d| !d.is_empty());
    dialogs
}

pub fn build_system_prompt(config: &PromptConfig) -> String {
    let mut out = config
        .base_instructions
        .replace("{persona}", &config.persona_name)
        .trim_end()
        .to_string();
    if config.enable_select_extension {
        out.push('\n');
        out.push_str(SELECT_EXTENSION.trim_end());
    }
    for (i, dialog) in config.fewshot_examples.iter().enumerate() {
        out.push_str(if i == 0 {
            "\n\nHere is an example\n\n"
        } else {
            "\n\nHere is another example\n\n"
        });
        let lines: Vec<String> = dialog
            .iter()
            .map(|turn| match turn.role {
                Speaker::User => format!("User: {}", turn.text),
                Speaker::Ai => format!("AI: {}", turn.text),
            })
            .collect();
        out.push_str(&lines.join("\n"));
    }
    out
}

/// System prompt followed by the transcript. Assistant turns are sent as the
/// raw text the LLM produced, tags included.
pub fn assemble_context(session: &Session, config: &PromptConfig) -> Vec<ChatMessage> {
    let mut messages = vec![ChatMessage::system(build_system_prompt(config))];
    let skip = config
        .max_history_messages
        .map(|max| session.messages.len().saturating_sub(max))
        .unwrap_or(0);
    for message in session.messages.iter().skip(skip) {
        let content = match (&message.role, &message.raw_text) {
            (Role::Assistant, Some(raw)) => raw.clone(),
            _ => render_segments(session, &message.segments),
        };
        messages.push(match message.role {
            Role::User => ChatMessage::user(content),
            Role::Assistant => ChatMessage::assistant(content),
        });
    }
    messages
}

fn render_segments(session: &Session, segments: &[Segment]) -> String {
    let mut out = String::new();
    for segment in segments {
        match segment {
            Segment::Text(text) => out.push_str(text),
            Segment::Image(id) => {
                if let Some(image) = session.image(id) {
                    let kind = image.tag_kind;
                    out.push_str(&format!(
                        "{} {} {}",
                        kind.open_token(),
                        image.description,
                        kind.close_token()
                    ));
                }
            }
        }
    }
    out
}
