//! Service configuration file (TOML).

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use quadnav_core::llm_provider::{ProviderConfig, DEFAULT_API_KEY_ENV};
use quadnav_core::mission_exec::RecoveryPolicy;
use quadnav_core::nav_sim::{FaultSpec, DEFAULT_CRUISE_SPEED};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {message}")]
    Syntax { path: PathBuf, message: String },
    #[error("{0}")]
    Invalid(String),
}

fn default_listen() -> String {
    "127.0.0.1:8080".into()
}
fn default_speed() -> f64 {
    DEFAULT_CRUISE_SPEED
}
fn default_pace() -> f64 {
    1.0
}
fn yes() -> bool {
    true
}
fn default_key_env() -> String {
    DEFAULT_API_KEY_ENV.into()
}
fn default_timeout() -> f64 {
    20.0
}
fn default_retries() -> u32 {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderSection {
    /// Use the offline keyword grounder instead of an HTTP endpoint.
    #[serde(default = "yes")]
    pub mock: bool,
    #[serde(default)]
    pub endpoint_url: Option<String>,
    #[serde(default)]
    pub model_name: Option<String>,
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default)]
    pub temperature: f64,
}

impl Default for ProviderSection {
    fn default() -> Self {
        ProviderSection {
            mock: true,
            endpoint_url: None,
            model_name: None,
            api_key_env: default_key_env(),
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            temperature: 0.0,
        }
    }
}

impl ProviderSection {
    /// HTTP settings with the key read from the environment.
    pub fn http_config(&self) -> Result<ProviderConfig, ConfigError> {
        let (Some(url), Some(model)) = (&self.endpoint_url, &self.model_name) else {
            return Err(ConfigError::Invalid("provider.endpoint_url and provider.model_name are required unless provider.mock = true".into()));
        };
        let mut config = ProviderConfig::new(url, model);
        config.api_key_env = self.api_key_env.clone();
        config.timeout_secs = self.timeout_secs;
        config.max_retries = self.max_retries;
        config.temperature = self.temperature;
        let config = config.with_api_key_from_env();
        config.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(config)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_listen")]
    pub listen: String,
    pub map_path: PathBuf,
    /// Defaults to the built-in template.
    #[serde(default)]
    pub template_path: Option<PathBuf>,
    #[serde(default = "default_speed")]
    pub cruise_speed: f64,
    /// Simulated seconds per wall-clock second; 0 runs missions unpaced.
    #[serde(default = "default_pace")]
    pub pace: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub policy: RecoveryPolicy,
    #[serde(default)]
    pub outcome_log: Option<PathBuf>,
    #[serde(default)]
    pub mission_log: Option<PathBuf>,
    #[serde(default)]
    pub provider: ProviderSection,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
}

impl ServiceConfig {
    /// Minimal config around a map file, with the mock provider.
    pub fn with_map(map_path: impl Into<PathBuf>) -> Self {
        ServiceConfig {
            listen: default_listen(),
            map_path: map_path.into(),
            template_path: None,
            cruise_speed: default_speed(),
            pace: default_pace(),
            seed: 0,
            policy: RecoveryPolicy::default(),
            outcome_log: None,
            mission_log: None,
            provider: ProviderSection::default(),
            faults: Vec::new(),
        }
    }

    /// Reads a TOML file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_owned(), source })?;
        let mut config: ServiceConfig =
            toml::from_str(&text).map_err(|e| ConfigError::Syntax { path: path.to_owned(), message: e.to_string() })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut config.map_path);
        config.template_path.as_mut().map(resolve);
        config.outcome_log.as_mut().map(resolve);
        config.mission_log.as_mut().map(resolve);
        Ok(config)
    }

    pub fn listen_addr(&self) -> Result<SocketAddr, ConfigError> {
        self.listen.parse().map_err(|_| ConfigError::Invalid(format!("listen address `{}` is not host:port", self.listen)))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.listen_addr()?;
        if !self.map_path.is_file() {
            return Err(ConfigError::Invalid(format!("map file {} does not exist", self.map_path.display())));
        }
        if let Some(template) = &self.template_path {
            if !template.is_file() {
                return Err(ConfigError::Invalid(format!("template file {} does not exist", template.display())));
            }
        }
        if !(self.cruise_speed.is_finite() && self.cruise_speed > 0.0) {
            return Err(ConfigError::Invalid(format!("cruise_speed must be > 0, got {}", self.cruise_speed)));
        }
        if !(self.pace.is_finite() && self.pace >= 0.0) {
            return Err(ConfigError::Invalid(format!("pace must be >= 0, got {}", self.pace)));
        }
        if !self.provider.mock {
            self.provider.http_config()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_full_file_and_resolves_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("service.toml");
        std::fs::write(
            &path,
            r#"
listen = "0.0.0.0:9000"
map_path = "maps/floor.json"
pace = 0
mission_log = "/var/log/missions.jsonl"

[provider]
mock = false
endpoint_url = "http://localhost:11434/v1/chat/completions"
model_name = "llama3"
timeout_secs = 5

[[faults]]
kind = "arrival_failure"
probability = 0.04
waypoint = "lift_jauh"
"#,
        )
        .unwrap();
        let config = ServiceConfig::load(&path).unwrap();
        assert_eq!(config.map_path, dir.path().join("maps/floor.json"));
        assert_eq!(config.mission_log.as_deref(), Some(Path::new("/var/log/missions.jsonl")));
        assert_eq!(config.pace, 0.0);
        assert!(!config.provider.mock);
        assert_eq!(config.provider.max_retries, 2);
        assert_eq!(config.faults.len(), 1);
        assert!(config.validate().is_err(), "map file is missing");
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "map_path = \"x\"\nlisten_port = 3\n").unwrap();
        assert!(matches!(ServiceConfig::load(&path), Err(ConfigError::Syntax { .. })));
    }

    #[test]
    fn http_provider_needs_endpoint() {
        let section = ProviderSection { mock: false, ..ProviderSection::default() };
        assert!(section.http_config().is_err());
    }

    #[test]
    fn shipped_config_is_valid() {
        let config = ServiceConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures/service.toml")).unwrap();
        config.validate().unwrap();
        assert!(config.provider.mock);
        assert_eq!(config.listen_addr().unwrap().port(), 8080);
    }
}
