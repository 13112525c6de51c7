//! Multiple-choice accuracy with and without the image-chat system prompt.

use std::fmt;
use std::path::Path;
use std::sync::OnceLock;

use futures::stream::{self, StreamExt};
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::llm::{build_system_prompt, ChatMessage, LlmClient, PromptConfig};

pub const LETTERS: [char; 4] = ['A', 'B', 'C', 'D'];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub task: String,
    pub question: String,
    pub options: Vec<String>,
    pub answer_key: char,
}

/// One question per line; blank lines are skipped.
pub fn parse_questions(text: &str, origin: &str) -> Result<Vec<Question>, EvalError> {
    let fail = |line: usize, reason: String| EvalError::FileFormat {
        origin: origin.to_string(),
        line,
        reason,
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let q: Question = serde_json::from_str(line).map_err(|e| fail(i + 1, e.to_string()))?;
        if q.options.len() != 4 {
            return Err(fail(i + 1, format!("expected 4 options, found {}", q.options.len())));
        }
        if !LETTERS.contains(&q.answer_key) {
            return Err(fail(i + 1, format!("answer_key {:?} is not A-D", q.answer_key)));
        }
        if q.task.trim().is_empty() {
            return Err(fail(i + 1, "empty task name".into()));
        }
        out.push(q);
    }
    if out.is_empty() {
        return Err(fail(0, "no questions".into()));
    }
    Ok(out)
}

pub fn load_questions(path: &Path) -> Result<Vec<Question>, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))?;
    parse_questions(&text, &path.display().to_string())
}

/// First standalone A, B, C or D in the reply.
pub fn extract_answer(reply: &str) -> Option<char> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"\b([ABCD])\b").expect("valid regex"));
    re.captures(reply).and_then(|c| c[1].chars().next())
}

#[derive(Debug, Clone)]
pub struct DegradationOptions {
    /// Questions in flight at once.
    pub parallelism: usize,
    /// Ask for step-by-step reasoning before the answer letter.
    pub reasoning: bool,
}

impl Default for DegradationOptions {
    fn default() -> Self {
        Self {
            parallelism: 1,
            reasoning: false,
        }
    }
}

pub fn format_question(q: &Question, reasoning: bool) -> String {
    let mut text = q.question.trim().to_string();
    for (letter, option) in LETTERS.iter().zip(&q.options) {
        text.push_str(&format!("\n{letter}. {option}"));
    }
    text.push_str(if reasoning {
        "\nThink step by step, then finish with the letter of the correct option."
    } else {
        "\nAnswer with the letter of the correct option.\nAnswer:"
    });
    text
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskRow {
    pub task_name: String,
    pub n_questions: usize,
    pub acc_with_prompt: f64,
    pub acc_without_prompt: f64,
    pub delta: f64,
    /// LLM failures, counted as wrong answers.
    pub errors_with_prompt: usize,
    pub errors_without_prompt: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DegradationReport {
    pub tasks: Vec<TaskRow>,
    pub average: TaskRow,
}

#[derive(Debug, Clone, Copy)]
struct Outcome {
    correct: bool,
    error: bool,
}

async fn ask(llm: &dyn LlmClient, system: Option<&str>, q: &Question, reasoning: bool) -> Outcome {
    let mut messages = Vec::new();
    if let Some(system) = system {
        messages.push(ChatMessage::system(system));
    }
    messages.push(ChatMessage::user(format_question(q, reasoning)));
    match llm.complete_once(&messages).await {
        Ok(reply) => Outcome {
            correct: extract_answer(&reply) == Some(q.answer_key),
            error: false,
        },
        Err(e) => {
            tracing::warn!(task = %q.task, error = %e, "question failed");
            Outcome {
                correct: false,
                error: true,
            }
        }
    }
}

fn percent(hits: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        100.0 * hits as f64 / n as f64
    }
}

/// Asks every question twice: bare, and under the system prompt from `prompt`.
pub async fn run_degradation(
    questions: &[Question],
    llm: &dyn LlmClient,
    prompt: &PromptConfig,
    options: &DegradationOptions,
) -> DegradationReport {
    let system = build_system_prompt(prompt);
    let outcomes: Vec<(Outcome, Outcome)> = stream::iter(questions)
        .map(|q| {
            let system = system.as_str();
            async move {
                let without = ask(llm, None, q, options.reasoning).await;
                let with = ask(llm, Some(system), q, options.reasoning).await;
                (with, without)
            }
        })
        .buffered(options.parallelism.max(1))
        .collect()
        .await;

    let mut order: Vec<&str> = Vec::new();
    for q in questions {
        if !order.contains(&q.task.as_str()) {
            order.push(&q.task);
        }
    }
    let tasks: Vec<TaskRow> = order
        .iter()
        .map(|task| {
            let rows: Vec<&(Outcome, Outcome)> = questions
                .iter()
                .zip(&outcomes)
                .filter(|(q, _)| q.task == *task)
                .map(|(_, o)| o)
                .collect();
            let n = rows.len();
            let with = percent(rows.iter().filter(|(w, _)| w.correct).count(), n);
            let without = percent(rows.iter().filter(|(_, wo)| wo.correct).count(), n);
            TaskRow {
                task_name: task.to_string(),
                n_questions: n,
                acc_with_prompt: with,
                acc_without_prompt: without,
                delta: with - without,
                errors_with_prompt: rows.iter().filter(|(w, _)| w.error).count(),
                errors_without_prompt: rows.iter().filter(|(_, wo)| wo.error).count(),
            }
        })
        .collect();

    let mean = |f: fn(&TaskRow) -> f64| tasks.iter().map(f).sum::<f64>() / tasks.len().max(1) as f64;
    let average = TaskRow {
        task_name: "Average".to_string(),
        n_questions: questions.len(),
        acc_with_prompt: mean(|t| t.acc_with_prompt),
        acc_without_prompt: mean(|t| t.acc_without_prompt),
        delta: mean(|t| t.acc_with_prompt) - mean(|t| t.acc_without_prompt),
        errors_with_prompt: tasks.iter().map(|t| t.errors_with_prompt).sum(),
        errors_without_prompt: tasks.iter().map(|t| t.errors_without_prompt).sum(),
    };
    DegradationReport { tasks, average }
}

impl fmt::Display for DegradationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self
            .tasks
            .iter()
            .map(|t| t.task_name.len())
            .max()
            .unwrap_or(0)
            .max("Average".len());
        writeln!(
            f,
            "{:<width$}  {:>5}  {:>10}  {:>10}  {:>7}",
            "Task", "N", "w/o prompt", "w/ prompt", "delta"
        )?;
        for row in self.tasks.iter().chain(std::iter::once(&self.average)) {
            writeln!(
                f,
                "{:<width$}  {:>5}  {:>10.2}  {:>10.2}  {:>+7.2}",
                row.task_name, row.n_questions, row.acc_without_prompt, row.acc_with_prompt, row.delta
            )?;
        }
        Ok(())
    }
}
