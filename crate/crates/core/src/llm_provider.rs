//! Provider boundary: something that turns a [`PromptBundle`] into raw model
//! text.
//!
//! [`HttpProvider`] speaks a minimal chat-completion contract (POST
//! `{model, messages, temperature}`, reply text read from
//! `choices[0].message.content`) with exponential backoff on transient
//! failures. [`MockProvider`] grounds instructions with a keyword table so
//! every test runs offline and deterministically.

use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::plan_schema::{wrapped_serialize, ActionCommand};
use crate::prompting::PromptBundle;
use crate::waypoint_world::WaypointWorld;

const DEFAULT_KEYWORDS: &str = include_str!("../../../fixtures/mock/keywords.json");

pub const DEFAULT_API_KEY_ENV: &str = "QUADNAV_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    /// Seconds spent in the provider, including retries.
    pub latency: f64,
    pub attempts: u32,
    pub provider_id: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProviderError {
    #[error("invalid provider config: {0}")]
    InvalidConfig(String),
    #[error("request timed out")]
    Timeout,
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("provider returned HTTP {status}: {body_excerpt}")]
    Status { status: u16, body_excerpt: String },
    #[error("provider reply carried no assistant text: {0}")]
    BadResponse(String),
    #[error("gave up after {attempts} attempts; last error: {last}")]
    RetriesExhausted { attempts: u32, last: Box<ProviderError> },
}

impl ProviderError {
    /// Worth another attempt.
    pub fn is_transient(&self) -> bool {
        match self {
            ProviderError::Timeout | ProviderError::Transport(_) => true,
            ProviderError::Status { status, .. } => matches!(status, 408 | 429 | 500..=599),
            _ => false,
        }
    }

    /// "Model unavailable" as opposed to "model refused": the request never
    /// produced a usable answer because the service could not be reached.
    pub fn is_unavailable(&self) -> bool {
        match self {
            ProviderError::RetriesExhausted { .. } => true,
            other => other.is_transient(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ProviderError::InvalidConfig(_) => "invalid_config",
            ProviderError::Timeout => "timeout",
            ProviderError::Transport(_) => "transport",
            ProviderError::Status { .. } => "status",
            ProviderError::BadResponse(_) => "bad_response",
            ProviderError::RetriesExhausted { .. } => "retries_exhausted",
        }
    }
}

pub trait Provider: Send + Sync {
    fn id(&self) -> String;

    /// Returns the model text verbatim; no parsing happens here.
    fn complete(&self, bundle: &PromptBundle) -> Result<CompletionResult, ProviderError>;
}

fn default_timeout() -> f64 {
    20.0
}
fn default_retries() -> u32 {
    2
}
fn default_backoff() -> f64 {
    1.0
}
fn default_key_env() -> String {
    DEFAULT_API_KEY_ENV.into()
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub endpoint_url: String,
    pub model_name: String,
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(skip)]
    pub api_key: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default)]
    pub temperature: f64,
    /// First backoff delay; doubles per retry with ±25% jitter.
    #[serde(default = "default_backoff")]
    pub backoff_base_secs: f64,
}

impl std::fmt::Debug for ProviderConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProviderConfig")
            .field("endpoint_url", &self.endpoint_url)
            .field("model_name", &self.model_name)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .field("timeout_secs", &self.timeout_secs)
            .field("max_retries", &self.max_retries)
            .field("temperature", &self.temperature)
            .field("backoff_base_secs", &self.backoff_base_secs)
            .finish()
    }
}

impl ProviderConfig {
    pub fn new(endpoint_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        ProviderConfig {
            endpoint_url: endpoint_url.into(),
            model_name: model_name.into(),
            api_key_env: default_key_env(),
            api_key: None,
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            temperature: 0.0,
            backoff_base_secs: default_backoff(),
        }
    }

    /// Fills `api_key` from the configured environment variable, if set.
    pub fn with_api_key_from_env(mut self) -> Self {
        if self.api_key.is_none() {
            self.api_key = std::env::var(&self.api_key_env).ok().filter(|k| !k.is_empty());
        }
        self
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        let bad = |m: String| Err(ProviderError::InvalidConfig(m));
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            return bad(format!("timeout must be > 0, got {}", self.timeout_secs));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return bad(format!("temperature must be >= 0, got {}", self.temperature));
        }
        if !(self.backoff_base_secs.is_finite() && self.backoff_base_secs >= 0.0) {
            return bad(format!("backoff base must be >= 0, got {}", self.backoff_base_secs));
        }
        if reqwest::Url::parse(&self.endpoint_url).is_err() {
            return bad(format!("endpoint `{}` is not a URL", self.endpoint_url));
        }
        Ok(())
    }

    /// Upper bound on the wall time of one `complete` call.
    pub fn total_budget(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs * f64::from(self.max_retries + 1))
    }

    pub fn backoff_delay(&self, retry: u32) -> Duration {
        let base = self.backoff_base_secs * 2f64.powi(retry as i32);
        let jitter = rand::thread_rng().gen_range(0.75..=1.25);
        Duration::from_secs_f64(base * jitter)
    }
}

pub struct HttpProvider {
    config: ProviderConfig,
}

impl HttpProvider {
    pub fn new(config: ProviderConfig) -> Result<Self, ProviderError> {
        config.validate()?;
        Ok(HttpProvider { config })
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.config
    }

    pub fn request_body(&self, bundle: &PromptBundle) -> Value {
        json!({
            "model": self.config.model_name,
            "messages": [
                {"role": "system", "content": bundle.system_text},
                {"role": "user", "content": bundle.user_text},
            ],
            "temperature": self.config.temperature,
        })
    }

    fn attempt(&self, client: &reqwest::blocking::Client, body: &str, timeout: Duration) -> Result<String, ProviderError> {
        let mut request = client
            .post(&self.config.endpoint_url)
            .timeout(timeout)
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(body.to_owned());
        if let Some(key) = &self.config.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(classify)?;
        let status = response.status();
        let text = response.text().map_err(classify)?;
        if !status.is_success() {
            return Err(ProviderError::Status { status: status.as_u16(), body_excerpt: excerpt(&text) });
        }
        assistant_text(&text)
    }
}

fn classify(err: reqwest::Error) -> ProviderError {
    if err.is_timeout() {
        ProviderError::Timeout
    } else {
        ProviderError::Transport(err.to_string())
    }
}

fn excerpt(text: &str) -> String {
    const LIMIT: usize = 200;
    match text.char_indices().nth(LIMIT) {
        Some((cut, _)) => format!("{}…", &text[..cut]),
        None => text.to_owned(),
    }
}

/// Pulls `choices[0].message.content` out of a chat-completion reply.
pub fn assistant_text(body: &str) -> Result<String, ProviderError> {
    let value: Value = serde_json::from_str(body).map_err(|e| ProviderError::BadResponse(format!("reply is not JSON: {e}")))?;
    value
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_owned)
        .ok_or_else(|| ProviderError::BadResponse(format!("no choices[0].message.content in {}", excerpt(body))))
}

impl Provider for HttpProvider {
    fn id(&self) -> String {
        format!("http:{}", self.config.model_name)
    }

    fn complete(&self, bundle: &PromptBundle) -> Result<CompletionResult, ProviderError> {
        let started = Instant::now();
        let deadline = started + self.config.total_budget();
        let timeout = Duration::from_secs_f64(self.config.timeout_secs);
        let body = self.request_body(bundle).to_string();
        // Built per call: a blocking client must not be created or dropped on
        // an async runtime thread, and callers run this via spawn_blocking.
        let client = reqwest::blocking::Client::builder().build().map_err(classify)?;

        let mut attempts = 0;
        let mut last = ProviderError::Timeout;
        while attempts <= self.config.max_retries {
            let remaining = deadline.saturating_duration_since(Instant::now());
            if remaining.is_zero() {
                break;
            }
            attempts += 1;
            match self.attempt(&client, &body, timeout.min(remaining)) {
                Ok(text) => {
                    return Ok(CompletionResult {
                        text,
                        latency: started.elapsed().as_secs_f64(),
                        attempts,
                        provider_id: self.id(),
                    })
                }
                Err(err) if err.is_transient() => last = err,
                Err(err) => return Err(err),
            }
            if attempts <= self.config.max_retries {
                let pause = self.config.backoff_delay(attempts - 1);
                std::thread::sleep(pause.min(deadline.saturating_duration_since(Instant::now())));
            }
        }
        Err(ProviderError::RetriesExhausted { attempts, last: Box::new(last) })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordEntry {
    /// Matched case-insensitively as a substring.
    pub pattern: String,
    pub action: ActionCommand,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordTable {
    #[serde(default)]
    pub version: String,
    pub entries: Vec<KeywordEntry>,
}

impl KeywordTable {
    pub fn shipped() -> Self {
        serde_json::from_str(DEFAULT_KEYWORDS).expect("shipped keyword table is valid")
    }

    pub fn from_json_str(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    /// Actions in order of first mention. Where matches overlap the longest
    /// one wins; an action mentioned twice is emitted once. Entries whose
    /// target is not on the map are ignored.
    pub fn ground(&self, world: &WaypointWorld, instruction: &str) -> Vec<ActionCommand> {
        let text = instruction.to_lowercase();
        let mut hits: Vec<(usize, usize, usize)> = Vec::new();
        for (entry_idx, entry) in self.entries.iter().enumerate() {
            if !targets_world(&entry.action, world) {
                continue;
            }
            let pattern = entry.pattern.to_lowercase();
            if pattern.is_empty() {
                continue;
            }
            hits.extend(text.match_indices(&pattern).map(|(start, m)| (start, start + m.len(), entry_idx)));
        }
        hits.sort_by_key(|&(start, end, idx)| (std::cmp::Reverse(end - start), start, idx));

        let mut accepted: Vec<(usize, usize, usize)> = Vec::new();
        for hit in hits {
            if accepted.iter().all(|&(s, e, _)| hit.1 <= s || hit.0 >= e) {
                accepted.push(hit);
            }
        }
        accepted.sort_by_key(|&(start, _, idx)| (start, idx));

        let mut actions: Vec<ActionCommand> = Vec::new();
        for (_, _, idx) in accepted {
            let action = &self.entries[idx].action;
            if !actions.contains(action) {
                actions.push(action.clone());
            }
        }
        actions
    }
}

fn targets_world(action: &ActionCommand, world: &WaypointWorld) -> bool {
    match action {
        ActionCommand::Goto { waypoint } => world.waypoint(waypoint).is_some(),
        ActionCommand::Explore { zone } => world.zone(zone).is_some(),
        _ => true,
    }
}

/// Keyword-table grounding with the shipped table, rendered in the wrapped
/// `{"response":{"actions":[...]}}` form.
pub fn mock_ground(world: &WaypointWorld, instruction: &str) -> String {
    wrapped_serialize(&KeywordTable::shipped().ground(world, instruction))
}

pub struct MockProvider {
    world: Arc<WaypointWorld>,
    table: KeywordTable,
}

impl MockProvider {
    pub fn new(world: Arc<WaypointWorld>) -> Self {
        MockProvider { world, table: KeywordTable::shipped() }
    }

    pub fn with_table(world: Arc<WaypointWorld>, table: KeywordTable) -> Self {
        MockProvider { world, table }
    }
}

impl Provider for MockProvider {
    fn id(&self) -> String {
        "mock".into()
    }

    /// Latency is reported as zero so replays stay byte-identical.
    fn complete(&self, bundle: &PromptBundle) -> Result<CompletionResult, ProviderError> {
        let actions = self.table.ground(&self.world, &bundle.user_text);
        Ok(CompletionResult { text: wrapped_serialize(&actions), latency: 0.0, attempts: 1, provider_id: self.id() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transient_classification() {
        assert!(ProviderError::Timeout.is_transient());
        assert!(ProviderError::Status { status: 503, body_excerpt: String::new() }.is_transient());
        assert!(ProviderError::Status { status: 429, body_excerpt: String::new() }.is_transient());
        assert!(!ProviderError::Status { status: 400, body_excerpt: String::new() }.is_transient());
        assert!(!ProviderError::BadResponse(String::new()).is_unavailable());
        let exhausted = ProviderError::RetriesExhausted { attempts: 3, last: Box::new(ProviderError::Timeout) };
        assert!(exhausted.is_unavailable());
    }

    #[test]
    fn backoff_doubles_with_jitter() {
        let config = ProviderConfig::new("http://localhost:1/v1/chat/completions", "m");
        for _ in 0..20 {
            let d0 = config.backoff_delay(0).as_secs_f64();
            let d2 = config.backoff_delay(2).as_secs_f64();
            assert!((0.75..=1.25).contains(&d0), "{d0}");
            assert!((3.0..=5.0).contains(&d2), "{d2}");
        }
    }

    #[test]
    fn config_validation() {
        let mut config = ProviderConfig::new("http://localhost:1/", "m");
        assert!(config.validate().is_ok());
        config.timeout_secs = 0.0;
        assert!(config.validate().is_err());
        config.timeout_secs = 1.0;
        config.temperature = -0.5;
        assert!(config.validate().is_err());
        config.temperature = 0.0;
        config.endpoint_url = "not a url".into();
        assert!(config.validate().is_err());
    }

    #[test]
    fn debug_redacts_key() {
        let mut config = ProviderConfig::new("http://localhost:1/", "m");
        config.api_key = Some("sk-secret".into());
        assert!(!format!("{config:?}").contains("sk-secret"));
    }

    #[test]
    fn reads_assistant_text() {
        let body = r#"{"choices":[{"message":{"role":"assistant","content":"  {\"actions\":[]} \n"}}]}"#;
        assert_eq!(assistant_text(body).unwrap(), "  {\"actions\":[]} \n");
        assert!(matches!(assistant_text(r#"{"choices":[]}"#), Err(ProviderError::BadResponse(_))));
        assert!(matches!(assistant_text("<html>"), Err(ProviderError::BadResponse(_))));
    }

    #[test]
    fn excerpt_is_char_safe() {
        let long = "é".repeat(500);
        assert_eq!(excerpt(&long).chars().count(), 201);
    }
}
