//! Evaluation: scripted conversation replays and the prompt degradation harness.

mod degradation;
mod script;

use thiserror::Error;

pub use degradation::{
    extract_answer, format_question, load_questions, parse_questions, run_degradation, DegradationOptions,
    DegradationReport, Question, TaskRow, LETTERS,
};
pub use script::{
    bundled_scripts, ordinal_of, run_all, run_script, script_config, Assertion, AssertionResult, LlmMode, Script,
    ScriptReport, ScriptTurn, SuiteReport, TurnReport, INTERACTION_TYPES,
};

/// The bundled 20-question synthetic file.
pub const SYNTHETIC_QUESTIONS: &str = include_str!("../../data/questions/synthetic.jsonl");

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot parse script {origin} (line {line}): {reason}")]
    ScriptParse { origin: String, line: usize, reason: String },
    #[error("bad question file {origin} (line {line}): {reason}")]
    FileFormat { origin: String, line: usize, reason: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
}
