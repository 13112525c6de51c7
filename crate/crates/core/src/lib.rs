//! Orchestration core for interactive text-to-image chat.
//!
//! An LLM is prompted to describe images inside `<image>` / `<edit>` tags.
//! [`protocol`] pulls those tags out of the token stream, [`router`] decides
//! what to generate, [`adapter`] refines the descriptions into backend
//! prompts, and [`backends`] renders them. [`engine`] runs the whole loop per
//! turn and persists everything through [`session`].

pub mod adapter;
pub mod backends;
pub mod config;
pub mod engine;
pub mod eval;
pub mod llm;
pub mod protocol;
pub mod router;
pub mod session;
