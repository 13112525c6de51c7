//! Service configuration, loaded from a JSON document.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::RefineConfig;
use crate::backends::BackendSpec;
use crate::llm::{LlmConfig, PromptConfig};
use crate::router::{ConsistencyPolicy, RoutingConfig};

/// Overrides `llm.api_base` when set.
pub const API_BASE_ENV: &str = "IT2I_LLM_API_BASE";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config file {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub llm: LlmConfig,
    pub prompt: PromptConfig,
    pub refine: RefineConfig,
    pub policy: ConsistencyPolicy,
    pub routing: RoutingConfig,
    pub backends: Vec<BackendSpec>,
    pub data_dir: PathBuf,
    pub listen_addr: String,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            llm: LlmConfig::default(),
            prompt: PromptConfig::default(),
            refine: RefineConfig::default(),
            policy: ConsistencyPolicy::default(),
            routing: RoutingConfig::default(),
            backends: vec![BackendSpec::mock("mock")],
            data_dir: PathBuf::from("it2i-data"),
            listen_addr: "127.0.0.1:8080".to_string(),
        }
    }
}

impl ServiceConfig {
    /// Reads, applies environment overrides, resolves data files relative to
    /// the config file, and validates.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config: ServiceConfig =
            serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
                path: path.to_path_buf(),
                source,
            })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        config.resolve_files(base)?;
        config.apply_env();
        config.validate()?;
        Ok(config)
    }

    pub fn apply_env(&mut self) {
        if let Ok(base) = std::env::var(API_BASE_ENV) {
            if !base.trim().is_empty() {
                self.llm.api_base = base.trim().to_string();
            }
        }
    }

    /// Loads `refine.template_file` / `refine.hints_file` if given.
    pub fn resolve_files(&mut self, base: &Path) -> Result<(), ConfigError> {
        let read = |p: &Path| {
            let full = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
            std::fs::read_to_string(&full).map_err(|source| ConfigError::Io { path: full, source })
        };
        if let Some(path) = self.refine.template_file.clone() {
            self.refine.refine_template = read(&path)?;
        }
        if let Some(path) = self.refine.hints_file.clone() {
            self.refine.variation_hints = crate::adapter::parse_hint_list(&read(&path)?);
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.llm.validate().map_err(ConfigError::Invalid)?;
        self.refine.validate().map_err(ConfigError::Invalid)?;
        self.policy.validate().map_err(ConfigError::Invalid)?;
        self.routing.validate().map_err(ConfigError::Invalid)?;
        if self.backends.is_empty() {
            return Err(ConfigError::Invalid("at least one backend is required".into()));
        }
        let mut names = std::collections::HashSet::new();
        for backend in &self.backends {
            backend.validate().map_err(ConfigError::Invalid)?;
            if !names.insert(backend.name.as_str()) {
                return Err(ConfigError::Invalid(format!("duplicate backend name {:?}", backend.name)));
            }
        }
        if self.listen_addr.parse::<SocketAddr>().is_err() {
            return Err(ConfigError::Invalid(format!(
                "listen_addr {:?} is not host:port",
                self.listen_addr
            )));
        }
        Ok(())
    }
}
