//! Runtime settings shared by the CLI and the service.
//!
//! Values come from an optional TOML file, then environment variables, then
//! command-line flags (applied by the caller), later sources winning.
//!
//! | variable           | meaning                                                     |
//! |--------------------|-------------------------------------------------------------|
//! | `TMEM_STORE`       | store directory                                             |
//! | `TMEM_PROVIDER`    | `scripted`, `live` or `none`                                |
//! | `TMEM_SCRIPT`      | scripted-provider response file                             |
//! | `TMEM_API_KEY_VAR` | name of the variable holding the live provider's API key    |
//! | `TMEM_BASE_URL`    | live provider base URL                                      |
//! | `TMEM_MODEL`       | live provider default model                                 |
//! | `TMEM_EMBEDDER`    | `hash` or `http`                                            |
//! | `TMEM_FIXED_CLOCK` | if set, unix seconds used as "now" for every timestamp      |
//! | `TMEM_BIND`        | service bind address                                        |

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{Clock, FixedClock, SystemClock};
use crate::curation::{validate_threshold, CurationConfig, DEFAULT_CLUSTER_THRESHOLD};
use crate::embed::{Embedder, HashEmbedder, HttpEmbedder, DEFAULT_EMBED_DIM};
use crate::llm::{ChatProvider, GatewayConfig, LiveProvider, Role, ScriptedProvider, UnavailableProvider};
use crate::model::DEFAULT_STEP_CAP;
use crate::retrieval::{DEFAULT_K, DEFAULT_TAU};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config file {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid setting {key}: {message}")]
    Invalid { key: &'static str, message: String },
    #[error("cannot load scripted responses from {path}: {source}")]
    Script { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    #[default]
    Scripted,
    Live,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    #[default]
    Hash,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub store: PathBuf,
    pub provider: ProviderKind,
    pub script: Option<PathBuf>,
    pub base_url: String,
    pub model: String,
    pub api_key_var: String,
    pub model_overrides: BTreeMap<Role, String>,
    pub timeout_secs: u64,
    pub rate_limit: Option<f64>,
    pub repair_retries: usize,
    pub embedder: EmbedderKind,
    pub embed_dim: usize,
    pub embed_model: String,
    pub fixed_clock: Option<i64>,
    pub step_cap: usize,
    pub threshold: f64,
    pub cluster_task_tips: bool,
    pub extra_entities: Vec<String>,
    pub tau: f64,
    pub k: usize,
    pub llm_tau_floor: bool,
    pub checkpoint_every: u64,
    pub sync: bool,
    pub bind: String,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            store: PathBuf::from("store"),
            provider: ProviderKind::Scripted,
            script: None,
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-4.1".into(),
            api_key_var: "OPENAI_API_KEY".into(),
            model_overrides: BTreeMap::new(),
            timeout_secs: 60,
            rate_limit: None,
            repair_retries: 2,
            embedder: EmbedderKind::Hash,
            embed_dim: DEFAULT_EMBED_DIM,
            embed_model: "text-embedding-3-small".into(),
            fixed_clock: None,
            step_cap: DEFAULT_STEP_CAP,
            threshold: DEFAULT_CLUSTER_THRESHOLD,
            cluster_task_tips: true,
            extra_entities: Vec::new(),
            tau: DEFAULT_TAU,
            k: DEFAULT_K,
            llm_tau_floor: true,
            checkpoint_every: crate::store::DEFAULT_CHECKPOINT_EVERY,
            sync: true,
            bind: "127.0.0.1:8080".into(),
        }
    }
}

fn parse_env<T: std::str::FromStr>(key: &'static str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Invalid { key, message: e.to_string() })
}

impl Settings {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
        toml::from_str(&text).map_err(|e| ConfigError::Parse { path: path.into(), message: e.to_string() })
    }

    /// Overlays values from `vars` (normally `std::env::vars()`).
    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<(), ConfigError> {
        for (key, value) in vars {
            match key.as_str() {
                "TMEM_STORE" => self.store = PathBuf::from(value),
                "TMEM_PROVIDER" => {
                    self.provider = match value.as_str() {
                        "scripted" => ProviderKind::Scripted,
                        "live" => ProviderKind::Live,
                        "none" => ProviderKind::None,
                        other => {
                            return Err(ConfigError::Invalid {
                                key: "TMEM_PROVIDER",
                                message: format!("`{other}` is not one of scripted, live, none"),
                            })
                        }
                    }
                }
                "TMEM_SCRIPT" => self.script = Some(PathBuf::from(value)),
                "TMEM_API_KEY_VAR" => self.api_key_var = value,
                "TMEM_BASE_URL" => self.base_url = value,
                "TMEM_MODEL" => self.model = value,
                "TMEM_EMBEDDER" => {
                    self.embedder = match value.as_str() {
                        "hash" => EmbedderKind::Hash,
                        "http" => EmbedderKind::Http,
                        other => {
                            return Err(ConfigError::Invalid { key: "TMEM_EMBEDDER", message: format!("`{other}` is not hash or http") })
                        }
                    }
                }
                "TMEM_FIXED_CLOCK" => self.fixed_clock = Some(parse_env("TMEM_FIXED_CLOCK", &value)?),
                "TMEM_BIND" => self.bind = value,
                _ => {}
            }
        }
        Ok(())
    }

    /// Defaults, then `file` if given, then the process environment.
    pub fn load(file: Option<&Path>) -> Result<Self, ConfigError> {
        let mut s = match file {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        s.apply_env(std::env::vars())?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        validate_threshold(self.threshold).map_err(|e| ConfigError::Invalid { key: "threshold", message: e.to_string() })?;
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(ConfigError::Invalid { key: "tau", message: format!("{} is outside (0, 1]", self.tau) });
        }
        if self.k == 0 {
            return Err(ConfigError::Invalid { key: "k", message: "must be at least 1".into() });
        }
        if self.embed_dim == 0 {
            return Err(ConfigError::Invalid { key: "embed_dim", message: "must be positive".into() });
        }
        if self.step_cap == 0 {
            return Err(ConfigError::Invalid { key: "step_cap", message: "must be positive".into() });
        }
        Ok(())
    }

    pub fn curation(&self) -> CurationConfig {
        CurationConfig {
            threshold: self.threshold,
            cluster_task_tips: self.cluster_task_tips,
            extra_entities: self.extra_entities.clone(),
        }
    }

    pub fn gateway_config(&self) -> GatewayConfig {
        GatewayConfig {
            repair_retries: self.repair_retries,
            rate_limit: self.rate_limit,
            model_overrides: self.model_overrides.clone(),
        }
    }

    pub fn api_key(&self) -> Option<String> {
        std::env::var(&self.api_key_var).ok().filter(|k| !k.is_empty())
    }

    pub fn provider(&self) -> Result<Arc<dyn ChatProvider>, ConfigError> {
        Ok(match self.provider {
            ProviderKind::Scripted => match &self.script {
                Some(path) => Arc::new(
                    ScriptedProvider::from_file(path).map_err(|source| ConfigError::Script { path: path.clone(), source })?,
                ),
                None => Arc::new(ScriptedProvider::new(Default::default())),
            },
            ProviderKind::Live => Arc::new(LiveProvider::new(
                &self.base_url,
                &self.model,
                self.api_key(),
                Duration::from_secs(self.timeout_secs),
            )),
            ProviderKind::None => Arc::new(UnavailableProvider),
        })
    }

    pub fn embedder(&self) -> Arc<dyn Embedder> {
        match self.embedder {
            EmbedderKind::Hash => Arc::new(HashEmbedder::new(self.embed_dim)),
            EmbedderKind::Http => Arc::new(HttpEmbedder::new(
                &self.base_url,
                &self.embed_model,
                self.api_key(),
                self.embed_dim,
                Duration::from_secs(self.timeout_secs),
            )),
        }
    }

    pub fn clock(&self) -> Arc<dyn Clock> {
        match self.fixed_clock {
            Some(secs) => Arc::new(FixedClock::at_unix(secs)),
            None => Arc::new(SystemClock),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn env_overrides_defaults() {
        let mut s = Settings::default();
        s.apply_env([
            ("TMEM_STORE".to_string(), "/tmp/x".to_string()),
            ("TMEM_PROVIDER".into(), "none".into()),
            ("TMEM_FIXED_CLOCK".into(), "42".into()),
            ("UNRELATED".into(), "y".into()),
        ])
        .unwrap();
        assert_eq!(s.store, PathBuf::from("/tmp/x"));
        assert_eq!(s.provider, ProviderKind::None);
        assert_eq!(s.fixed_clock, Some(42));
        assert!(s.apply_env([("TMEM_PROVIDER".to_string(), "bogus".to_string())]).is_err());
    }

    #[test]
    fn file_values_and_validation() {
        let s: Settings = toml::from_str("threshold = 0.9\nk = 7\n[model_overrides]\nsegmenter = \"big\"\n").unwrap();
        assert_eq!((s.threshold, s.k, s.tau), (0.9, 7, DEFAULT_TAU));
        assert_eq!(s.model_overrides[&Role::Segmenter], "big");
        assert!(Settings { threshold: 1.0 + 1e-9, ..Settings::default() }.validate().is_err());
        assert!(Settings { threshold: 1.0, ..Settings::default() }.validate().is_ok());
        assert!(toml::from_str::<Settings>("bogus = 1").is_err());
    }
}
