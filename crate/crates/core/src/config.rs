//! TOML audit configuration.
//!
//! ```toml
//! dataset = "data/mmlu.jsonl"
//! output_dir = "runs/demo"
//!
//! [[models]]
//! id = "gpt-4o"
//! backend = "http"
//! endpoint = "https://api.openai.com/v1"
//! credential_env = "OPENAI_API_KEY"
//! ```
//!
//! Everything else has a default. Credentials are never read from the file,
//! only from the environment variable it names.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{CacheMode, RetryPolicy, SyntheticProfile};
use crate::dataset::{Field, Level, Seeds, DEFAULT_PER_TOPIC, TOPICS};
use crate::personae::compound_from_ids;
use crate::runner::{Mode, DEFAULT_FAILURE_BUDGET, DEFAULT_TRIALS, GENERATION_TEMPERATURE, SALARY_TEMPERATURE};
use crate::stats::DEFAULT_ALPHA;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid value for `{key}`: {message}")]
    Invalid { key: String, message: String },
}

fn invalid(key: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub id: String,
    pub backend: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    /// Name of the environment variable holding the API key.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub credential_env: Option<String>,
    /// Whether the endpoint implements `POST /score`.
    #[serde(default)]
    pub scoring: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct CacheConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    #[serde(default)]
    pub mode: CacheMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ExperimentId {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
    #[serde(rename = "3")]
    Three,
}

fn default_trials() -> u32 {
    DEFAULT_TRIALS
}
fn default_temperatures() -> Vec<f64> {
    vec![GENERATION_TEMPERATURE, SALARY_TEMPERATURE]
}
fn default_generation_temperature() -> f64 {
    GENERATION_TEMPERATURE
}
fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}
fn default_n_per_topic() -> usize {
    DEFAULT_PER_TOPIC
}
fn default_parallelism() -> usize {
    4
}
fn default_failure_budget() -> u32 {
    DEFAULT_FAILURE_BUDGET
}
fn default_one() -> u32 {
    1
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/audit")
}
fn default_experiments() -> Vec<ExperimentId> {
    vec![ExperimentId::One, ExperimentId::Two, ExperimentId::Three]
}
fn default_modes() -> Vec<Mode> {
    vec![Mode::Generative]
}
fn default_topics() -> Vec<String> {
    TOPICS.iter().map(|t| t.to_string()).collect()
}
fn default_fields() -> Vec<Field> {
    Field::ALL.to_vec()
}
fn default_levels() -> Vec<Level> {
    Level::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditConfig {
    pub models: Vec<ModelConfig>,
    /// JSONL item file; relative paths resolve against the config file.
    pub dataset: PathBuf,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default = "default_experiments")]
    pub experiments: Vec<ExperimentId>,
    /// Experiment-1 evaluation modes.
    #[serde(default = "default_modes")]
    pub modes: Vec<Mode>,
    #[serde(default = "default_topics")]
    pub topics: Vec<String>,
    #[serde(default = "default_n_per_topic")]
    pub n_per_topic: usize,
    #[serde(default = "default_fields")]
    pub fields: Vec<Field>,
    #[serde(default = "default_levels")]
    pub levels: Vec<Level>,
    /// Compound persona ids for experiment 3, e.g. `male+asian+expatriate`.
    #[serde(default)]
    pub compounds: Vec<String>,
    #[serde(default = "default_trials")]
    pub trials: u32,
    /// Salary-experiment temperatures.
    #[serde(default = "default_temperatures")]
    pub temperatures: Vec<f64>,
    /// Temperature for experiments 1 and 2.
    #[serde(default = "default_generation_temperature")]
    pub generation_temperature: f64,
    #[serde(default = "default_one")]
    pub repeats: u32,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default = "default_failure_budget")]
    pub failure_budget: u32,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub cache: CacheConfig,
    #[serde(default)]
    pub retry: RetryPolicy,
    /// Response law of `synthetic` models.
    #[serde(default)]
    pub synthetic: SyntheticProfile,
}

impl AuditConfig {
    /// Parses and validates TOML text. Errors name the offending key path.
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let de = toml::Deserializer::new(text);
        let config: AuditConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let message = inner.message().to_string();
            ConfigError::Parse {
                path: origin.to_string(),
                message: if path.is_empty() || path == "." {
                    message
                } else {
                    format!("at `{path}`: {message}")
                },
            }
        })?;
        config.validate()?;
        Ok(config)
    }

    /// Checks the cross-field invariants serde cannot express.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.models.is_empty() {
            return Err(invalid("models", "at least one model is required"));
        }
        for (i, m) in self.models.iter().enumerate() {
            if m.id.trim().is_empty() {
                return Err(invalid(format!("models[{i}].id"), "must not be empty"));
            }
            if self.models[..i].iter().any(|o| o.id == m.id) {
                return Err(invalid(format!("models[{i}].id"), format!("duplicate id {:?}", m.id)));
            }
            if m.backend == BackendKind::Http && m.endpoint.is_none() {
                return Err(invalid(format!("models[{i}].endpoint"), "http backends need an endpoint"));
            }
        }
        if self.trials < 1 {
            return Err(invalid("trials", "must be at least 1"));
        }
        if self.repeats < 1 {
            return Err(invalid("repeats", "must be at least 1"));
        }
        if self.parallelism < 1 {
            return Err(invalid("parallelism", "must be at least 1"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(invalid("alpha", format!("{} is not in (0, 1)", self.alpha)));
        }
        if self.n_per_topic < 1 {
            return Err(invalid("n_per_topic", "must be at least 1"));
        }
        if self.temperatures.is_empty() {
            return Err(invalid("temperatures", "at least one temperature is required"));
        }
        for (i, t) in self.temperatures.iter().chain([&self.generation_temperature]).enumerate() {
            if !(t.is_finite() && *t >= 0.0) {
                let key = if i < self.temperatures.len() {
                    format!("temperatures[{i}]")
                } else {
                    "generation_temperature".into()
                };
                return Err(invalid(key, format!("{t} is not a non-negative number")));
            }
        }
        if matches!(self.cache.mode, CacheMode::Replay | CacheMode::StrictReplay | CacheMode::Record)
            && self.cache.dir.is_none()
        {
            return Err(invalid("cache.dir", "required when cache.mode is not off"));
        }
        for (i, c) in self.compounds.iter().enumerate() {
            compound_from_ids(c).map_err(|e| invalid(format!("compounds[{i}]"), e.to_string()))?;
        }
        self.synthetic.validate().map_err(|m| invalid("synthetic", m))?;
        Ok(())
    }

    /// Resolves relative paths against `base` (normally the config file's directory).
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.dataset);
        fix(&mut self.output_dir);
        if let Some(d) = self.cache.dir.as_mut() {
            fix(d);
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Reads, parses, validates, and resolves relative paths.
pub fn load_config(path: &Path) -> Result<AuditConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let mut config = AuditConfig::from_toml_str(&text, &path.display().to_string())?;
    config.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    Ok(config)
}
