//! Turns raw tag descriptions into backend prompts.
//!
//! Refinement asks the LLM a second time to expand a terse description into
//! a detailed caption. Variations repeat the refinement with a different
//! hint each time, so one description yields several distinct prompts.
//! Any LLM failure falls back to the rule-based prompt; refinement never
//! fails a turn.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{ChatMessage, LlmClient};

const DEFAULT_TEMPLATE: &str = include_str!("../data/refine_template.txt");
const DEFAULT_HINTS: &str = include_str!("../data/variation_hints.txt");

const REFINE_SYSTEM: &str =
    "You write prompts for a text-to-image model. Follow the instructions exactly.";

pub const DESCRIPTION_SLOT: &str = "{description}";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub enabled: bool,
    /// Must contain `{description}` exactly once.
    pub refine_template: String,
    /// Replaces `refine_template` with the file's contents when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub template_file: Option<PathBuf>,
    pub style_suffix: String,
    pub negative_prompt_default: String,
    pub max_prompt_chars: usize,
    pub variation_hints: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hints_file: Option<PathBuf>,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            refine_template: DEFAULT_TEMPLATE.to_string(),
            template_file: None,
            style_suffix: String::new(),
            negative_prompt_default: "blurry, low quality, distorted, watermark".to_string(),
            max_prompt_chars: 1000,
            variation_hints: parse_hint_list(DEFAULT_HINTS),
            hints_file: None,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<(), String> {
        let slots = self.refine_template.matches(DESCRIPTION_SLOT).count();
        if slots != 1 {
            return Err(format!(
                "refine.refine_template must contain {DESCRIPTION_SLOT} exactly once (found {slots})"
            ));
        }
        if self.max_prompt_chars == 0 {
            return Err("refine.max_prompt_chars must be positive".into());
        }
        Ok(())
    }

    /// Hint for the 1-based variation `index`, cycling through the list.
    pub fn hint(&self, index: usize) -> String {
        if self.variation_hints.is_empty() {
            return format!("variation {index}");
        }
        self.variation_hints[(index.max(1) - 1) % self.variation_hints.len()].clone()
    }
}

/// One hint per non-empty line; `#` starts a comment line.
pub fn parse_hint_list(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefinedPrompt {
    pub positive: String,
    pub negative: String,
    /// The description exactly as the LLM emitted it.
    pub source_description: String,
    pub variation_hint: Option<String>,
    /// Set when the rule-based fallback replaced a failed refinement.
    pub warning: Option<String>,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum AdapterError {
    #[error("description is empty")]
    EmptyDescription,
    #[error("variation count must be at least 1")]
    InvalidCount,
}

pub async fn refine(
    description: &str,
    config: &RefineConfig,
    llm: &dyn LlmClient,
) -> Result<RefinedPrompt, AdapterError> {
    refine_variant(description, None, config, llm).await
}

/// `n` prompts using hints 1..=n.
pub async fn variations(
    description: &str,
    n: usize,
    config: &RefineConfig,
    llm: &dyn LlmClient,
) -> Result<Vec<RefinedPrompt>, AdapterError> {
    if n == 0 {
        return Err(AdapterError::InvalidCount);
    }
    let mut out = Vec::with_capacity(n);
    for index in 1..=n {
        out.push(refine_variant(description, Some(index), config, llm).await?);
    }
    Ok(out)
}

/// Refines with the hint for 1-based `variation`, or without a hint.
pub async fn refine_variant(
    description: &str,
    variation: Option<usize>,
    config: &RefineConfig,
    llm: &dyn LlmClient,
) -> Result<RefinedPrompt, AdapterError> {
    if description.trim().is_empty() {
        return Err(AdapterError::EmptyDescription);
    }
    let hint = variation.map(|i| config.hint(i));
    let mut warning = None;

    let refined = if config.enabled {
        let mut request = config.refine_template.replacen(DESCRIPTION_SLOT, description.trim(), 1);
        if let Some(hint) = &hint {
            request.push_str("\n\nVariation: ");
            request.push_str(hint);
        }
        let messages = [ChatMessage::system(REFINE_SYSTEM), ChatMessage::user(request)];
        match llm.complete_once(&messages).await {
            Ok(text) => {
                let cleaned = clean_caption(&text);
                if cleaned.is_empty() {
                    warning = Some("refinement returned no text; used the description".to_string());
                    None
                } else {
                    Some(cleaned)
                }
            }
            Err(e) => {
                tracing::warn!(error = %e, "prompt refinement failed, using fallback");
                warning = Some(format!("refinement failed ({e}); used the description"));
                None
            }
        }
    } else {
        None
    };

    let base = refined.unwrap_or_else(|| {
        let mut base = description.trim().to_string();
        if let Some(hint) = &hint {
            base.push_str(", ");
            base.push_str(hint);
        }
        base
    });
    let mut positive = truncate_at_word(&format!("{base}{}", config.style_suffix), config.max_prompt_chars);
    if positive.is_empty() {
        positive = description.trim().chars().take(config.max_prompt_chars).collect();
    }

    Ok(RefinedPrompt {
        positive,
        negative: config.negative_prompt_default.clone(),
        source_description: description.to_string(),
        variation_hint: hint,
        warning,
    })
}

/// Collapses whitespace and strips wrapping quotes.
fn clean_caption(text: &str) -> String {
    let collapsed = text.split_whitespace().collect::<Vec<_>>().join(" ");
    let trimmed = collapsed.trim_matches(|c| c == '"' || c == '\'' || c == '“' || c == '”');
    trimmed.trim().to_string()
}

/// At most `max` characters, cut at the last whitespace when one exists.
pub fn truncate_at_word(text: &str, max: usize) -> String {
    if text.chars().count() <= max {
        return text.to_string();
    }
    let cut: String = text.chars().take(max).collect();
    let next_is_space = text.chars().nth(max).is_some_and(char::is_whitespace);
    if next_is_space {
        return cut.trim_end().to_string();
    }
    match cut.rfind(char::is_whitespace) {
        Some(idx) if !cut[..idx].trim().is_empty() => cut[..idx].trim_end().to_string(),
        _ => cut,
    }
}
