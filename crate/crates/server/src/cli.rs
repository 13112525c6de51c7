//! `it2i` subcommands. Config problems exit with 2, runtime failures with 1.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use tokio::io::{AsyncBufReadExt, BufReader};

use it2i_core::config::ServiceConfig;
use it2i_core::engine::TurnEvent;
use it2i_core::eval::{
    bundled_scripts, load_questions, parse_questions, run_all, run_degradation, DegradationOptions, EvalError, Script,
    SuiteReport, SYNTHETIC_QUESTIONS,
};
use it2i_core::llm::OpenAiClient;

use crate::{build_engine, router, AppState};

#[derive(Debug, Parser)]
#[command(name = "it2i", version, about = "Interactive text-to-image chat service")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// JSON config file; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the HTTP/SSE server.
    Serve {
        #[command(flatten)]
        config: ConfigArg,
        /// Overrides `listen_addr`; port 0 picks a free port.
        #[arg(long)]
        listen: Option<String>,
    },
    /// Chat in the terminal; one line per user turn.
    Chat {
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Replay a bundled script against mocks, e.g. `fig6`.
    Replay {
        name: String,
        #[arg(long, default_value = "it2i-replay")]
        out: PathBuf,
    },
    /// Run evaluations.
    Eval {
        #[command(subcommand)]
        target: EvalCommand,
    },
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Replay scripted conversations and check their assertions.
    Scripts {
        #[command(flatten)]
        config: ConfigArg,
        /// Run only the bundled script with this name.
        #[arg(long)]
        only: Option<String>,
        /// Extra script files to run after the bundled ones.
        #[arg(long = "script")]
        scripts: Vec<PathBuf>,
        #[arg(long, default_value = "it2i-eval")]
        out: PathBuf,
        /// Print the full report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Compare answer accuracy with and without the system prompt.
    Degradation {
        #[command(flatten)]
        config: ConfigArg,
        /// JSON Lines question file; the bundled synthetic set when omitted.
        #[arg(long)]
        questions: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        parallelism: usize,
        /// Ask for step-by-step reasoning before the answer.
        #[arg(long)]
        reasoning: bool,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug)]
pub enum Failure {
    Config(String),
    Runtime(String),
}

impl Failure {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            Failure::Config(_) => ExitCode::from(2),
            Failure::Runtime(_) => ExitCode::from(1),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "config error: {m}"),
            Failure::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(err: EvalError) -> Self {
        match err {
            EvalError::Io(_) => Failure::Runtime(err.to_string()),
            _ => Failure::Config(err.to_string()),
        }
    }
}

fn runtime(err: impl fmt::Display) -> Failure {
    Failure::Runtime(err.to_string())
}

pub fn load_config(arg: &ConfigArg) -> Result<ServiceConfig, Failure> {
    match &arg.config {
        Some(path) => ServiceConfig::load(path).map_err(|e| Failure::Config(e.to_string())),
        None => {
            let mut config = ServiceConfig::default();
            config.apply_env();
            config.validate().map_err(|e| Failure::Config(e.to_string()))?;
            Ok(config)
        }
    }
}

/// A new directory under `out` so repeated runs never collide.
fn fresh_dir(out: &Path) -> Result<PathBuf, Failure> {
    let stamp = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default().as_millis();
    for n in 0.. {
        let dir = out.join(format!("run-{stamp}-{n}"));
        if !dir.exists() {
            std::fs::create_dir_all(&dir).map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))?;
            return Ok(dir);
        }
    }
    unreachable!()
}

pub async fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Serve { config, listen } => serve(&config, listen).await,
        Command::Chat { config } => chat(&config).await,
        Command::Replay { name, out } => replay(&name, &out).await,
        Command::Eval {
            target:
                EvalCommand::Scripts {
                    config,
                    only,
                    scripts,
                    out,
                    json,
                },
        } => eval_scripts(&config, only, &scripts, &out, json).await,
        Command::Eval {
            target:
                EvalCommand::Degradation {
                    config,
                    questions,
                    parallelism,
                    reasoning,
                    json,
                },
        } => eval_degradation(&config, questions, parallelism, reasoning, json).await,
    }
}

async fn serve(arg: &ConfigArg, listen: Option<String>) -> Result<(), Failure> {
    let mut config = load_config(arg)?;
    if let Some(addr) = listen {
        config.listen_addr = addr;
        config.validate().map_err(|e| Failure::Config(e.to_string()))?;
    }
    let addr = config.listen_addr.clone();
    let state = AppState::new(build_engine(config).map_err(Failure::Runtime)?);
    let listener = tokio::net::TcpListener::bind(&addr)
        .await
        .map_err(|e| runtime(format!("cannot listen on {addr}: {e}")))?;
    let local = listener.local_addr().map_err(runtime)?;
    println!("listening on http://{local}");
    std::io::stdout().flush().ok();
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(runtime)
}

async fn chat(arg: &ConfigArg) -> Result<(), Failure> {
    let config = load_config(arg)?;
    let engine = build_engine(config).map_err(Failure::Runtime)?;
    let session = engine.create_session().map_err(runtime)?;
    let sid = session.session_id;
    println!("session {sid}");
    let mut lines = BufReader::new(tokio::io::stdin()).lines();
    let mut stdout = std::io::stdout();
    while let Some(line) = lines.next_line().await.map_err(runtime)? {
        if line.trim().is_empty() {
            continue;
        }
        let handle = engine.run_turn(&sid, &line).map_err(runtime)?;
        let mut events = handle.events;
        while let Some(event) = events.recv().await {
            match event {
                TurnEvent::TextDelta { delta, .. } => {
                    print!("{delta}");
                    stdout.flush().ok();
                }
                TurnEvent::ImageReady { image_id, .. } => {
                    let record = engine.store().find_image(&image_id).map_err(runtime)?;
                    if let Some(digest) = record.content_digest {
                        println!("\n[image {image_id}] {}", engine.store().image_path(&digest).display());
                    }
                }
                TurnEvent::ImageFailed { image_id, code, detail } => {
                    println!("\n[image {image_id} failed: {code}: {detail}]");
                }
                TurnEvent::Error { code, detail } => eprintln!("\nturn failed: {code}: {detail}"),
                TurnEvent::TurnCompleted { .. } => println!(),
                TurnEvent::ImagePending { .. } | TurnEvent::FocusChanged { .. } => {}
            }
        }
    }
    Ok(())
}

fn bundled(name: &str) -> Result<Script, Failure> {
    let scripts = bundled_scripts();
    let names: Vec<String> = scripts.iter().map(|s| s.name.clone()).collect();
    scripts
        .into_iter()
        .find(|s| s.name == name || s.name.split('_').next() == Some(name))
        .ok_or_else(|| Failure::Config(format!("no bundled script {name:?}; available: {}", names.join(", "))))
}

async fn replay(name: &str, out: &Path) -> Result<(), Failure> {
    let script = bundled(name)?;
    let dir = fresh_dir(out)?;
    let report = it2i_core::eval::run_script(&script, &ServiceConfig::default(), &dir).await?;
    let generations = report.generations();
    let edits = generations.iter().filter(|(_, _, parent)| parent.is_some()).count();
    println!(
        "{}: {} turns, {} generations ({} new, {} edits)",
        report.name,
        report.turns.len(),
        generations.len(),
        generations.len() - edits,
        edits
    );
    for (ordinal, kind, parent) in &generations {
        match parent {
            Some(p) => println!("  image {ordinal}: {} from image {p}", kind.as_str()),
            None => println!("  image {ordinal}: {}", kind.as_str()),
        }
    }
    println!("output: {}", dir.display());
    report_failures(&report.failures())
}

fn report_failures(failures: &[String]) -> Result<(), Failure> {
    if failures.is_empty() {
        return Ok(());
    }
    for failure in failures {
        println!("FAIL {failure}");
    }
    Err(Failure::Runtime(format!("{} assertion(s) failed", failures.len())))
}

fn print_suite(suite: &SuiteReport) {
    for script in &suite.scripts {
        let mark = if script.passed { "PASS" } else { "FAIL" };
        println!("{mark} {} [{}]", script.name, script.covers.join(", "));
    }
    let (covered, total) = suite.coverage();
    println!("scripts passed: {}/{}", suite.passed, suite.total);
    println!("interaction types covered: {covered}/{total}");
}

async fn eval_scripts(
    arg: &ConfigArg,
    only: Option<String>,
    extra: &[PathBuf],
    out: &Path,
    json: bool,
) -> Result<(), Failure> {
    let config = load_config(arg)?;
    let mut scripts = match only {
        Some(name) => vec![bundled(&name)?],
        None if extra.is_empty() => bundled_scripts(),
        None => Vec::new(),
    };
    for path in extra {
        scripts.push(Script::load(path)?);
    }
    let dir = fresh_dir(out)?;
    let suite = run_all(&scripts, &config, &dir).await?;
    if json {
        println!("{}", serde_json::to_string_pretty(&suite).map_err(runtime)?);
    } else {
        print_suite(&suite);
    }
    let failures: Vec<String> = suite.scripts.iter().flat_map(|s| s.failures()).collect();
    report_failures(&failures)
}

async fn eval_degradation(
    arg: &ConfigArg,
    questions: Option<PathBuf>,
    parallelism: usize,
    reasoning: bool,
    json: bool,
) -> Result<(), Failure> {
    let config = load_config(arg)?;
    let questions = match questions {
        Some(path) => load_questions(&path)?,
        None => parse_questions(SYNTHETIC_QUESTIONS, "synthetic.jsonl")?,
    };
    let llm = OpenAiClient::new(config.llm.clone()).map_err(runtime)?;
    let options = DegradationOptions { parallelism, reasoning };
    let report = run_degradation(&questions, &llm, &config.prompt, &options).await;
    if json {
        println!("{}", serde_json::to_string_pretty(&report).map_err(runtime)?);
    } else {
        print!("{report}");
    }
    Ok(())
}
