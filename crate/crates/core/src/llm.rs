//! Uniform access to a chat-completion model.
//!
//! The [`Gateway`] owns schema validation, repair retries, rate limiting and
//! per-role model overrides. Providers only move text: [`ScriptedProvider`]
//! replays canned payloads keyed by `(role, sha256(prompt))`, [`LiveProvider`]
//! speaks the generic chat-completions HTTP contract.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::schema::SchemaRegistry;

/// Default number of repair retries after a schema violation.
pub const DEFAULT_REPAIR_RETRIES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    ThoughtCategorizer,
    PatternDetector,
    OutcomeInterpreter,
    AttributionAnalyst,
    TipGenerator,
    Segmenter,
    SubtaskTipper,
    Generalizer,
    Consolidator,
    RetrievalSelector,
}

impl Role {
    pub const ALL: [Role; 10] = [
        Role::ThoughtCategorizer,
        Role::PatternDetector,
        Role::OutcomeInterpreter,
        Role::AttributionAnalyst,
        Role::TipGenerator,
        Role::Segmenter,
        Role::SubtaskTipper,
        Role::Generalizer,
        Role::Consolidator,
        Role::RetrievalSelector,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Role::ThoughtCategorizer => "thought_categorizer",
            Role::PatternDetector => "pattern_detector",
            Role::OutcomeInterpreter => "outcome_interpreter",
            Role::AttributionAnalyst => "attribution_analyst",
            Role::TipGenerator => "tip_generator",
            Role::Segmenter => "segmenter",
            Role::SubtaskTipper => "subtask_tipper",
            Role::Generalizer => "generalizer",
            Role::Consolidator => "consolidator",
            Role::RetrievalSelector => "retrieval_selector",
        }
    }

    pub fn parse(s: &str) -> Option<Role> {
        Role::ALL.into_iter().find(|r| r.as_str() == s)
    }

    pub fn schema_id(&self) -> &'static str {
        match self {
            Role::ThoughtCategorizer => "thought_categorizer.v1",
            Role::PatternDetector => "pattern_detector.v1",
            Role::OutcomeInterpreter => "outcome_interpreter.v1",
            Role::AttributionAnalyst => "attribution_analyst.v1",
            Role::TipGenerator => "tip_generator.v1",
            Role::Segmenter => "segmenter.v1",
            Role::SubtaskTipper => "subtask_tipper.v1",
            Role::Generalizer => "generalizer.v1",
            Role::Consolidator => "consolidator.v1",
            Role::RetrievalSelector => "retrieval_selector.v1",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LlmRequest {
    pub role: Role,
    pub prompt: String,
    pub response_schema_id: String,
    pub temperature: f64,
}

impl LlmRequest {
    /// Request using the role's registered schema at temperature 0.
    pub fn new(role: Role, prompt: impl Into<String>) -> Self {
        LlmRequest { role, prompt: prompt.into(), response_schema_id: role.schema_id().to_owned(), temperature: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LlmResponse {
    pub payload: serde_json::Value,
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProviderError {
    #[error("provider unavailable: {0}")]
    Unavailable(String),
    #[error("provider timed out")]
    Timeout,
    #[error("no scripted response for role {role} with prompt sha256 {sha256} (prompt begins: {preview:?})")]
    Unmatched { role: Role, sha256: String, preview: String },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GatewayError {
    #[error("provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("schema violation for `{schema_id}` after {attempts} attempts: {detail}")]
    SchemaViolation { schema_id: String, attempts: usize, detail: String },
    #[error("model call timed out")]
    Timeout,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl From<ProviderError> for GatewayError {
    fn from(e: ProviderError) -> Self {
        match e {
            ProviderError::Timeout => GatewayError::Timeout,
            other => GatewayError::ProviderUnavailable(other.to_string()),
        }
    }
}

/// Moves a prompt to a model and returns the raw reply text.
pub trait ChatProvider: Send + Sync {
    fn chat(&self, role: Role, model: Option<&str>, prompt: &str, temperature: f64) -> Result<String, ProviderError>;
}

pub fn prompt_sha256(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

/// On-disk scripted response table: `responses[role][sha256(prompt)] = payload`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptFile {
    pub version: u32,
    pub responses: BTreeMap<Role, BTreeMap<String, serde_json::Value>>,
}

impl ScriptFile {
    pub fn new() -> Self {
        ScriptFile { version: 1, responses: BTreeMap::new() }
    }

    pub fn insert(&mut self, role: Role, prompt: &str, payload: serde_json::Value) {
        self.responses.entry(role).or_default().insert(prompt_sha256(prompt), payload);
    }

    pub fn merge(&mut self, other: ScriptFile) {
        for (role, table) in other.responses {
            self.responses.entry(role).or_default().extend(table);
        }
    }

    pub fn len(&self) -> usize {
        self.responses.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    /// Pretty JSON with a trailing newline; stable byte output for checked-in fixtures.
    pub fn to_pretty_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("script serializes");
        s.push('\n');
        s
    }
}

/// Deterministic provider: output is a pure function of `(role, sha256(prompt))`.
#[derive(Debug, Clone)]
pub struct ScriptedProvider {
    script: ScriptFile,
}

impl ScriptedProvider {
    pub fn new(script: ScriptFile) -> Self {
        Self { script }
    }

    pub fn from_file(path: &Path) -> std::io::Result<Self> {
        ScriptFile::load(path).map(Self::new)
    }

    pub fn script(&self) -> &ScriptFile {
        &self.script
    }
}

impl ChatProvider for ScriptedProvider {
    fn chat(&self, role: Role, _model: Option<&str>, prompt: &str, _temperature: f64) -> Result<String, ProviderError> {
        let sha256 = prompt_sha256(prompt);
        match self.script.responses.get(&role).and_then(|t| t.get(&sha256)) {
            Some(payload) => Ok(payload.to_string()),
            None => Err(ProviderError::Unmatched { role, sha256, preview: prompt.chars().take(80).collect() }),
        }
    }
}

/// Provider that is always down; useful for fallback paths.
#[derive(Debug, Default, Clone, Copy)]
pub struct UnavailableProvider;

impl ChatProvider for UnavailableProvider {
    fn chat(&self, _: Role, _: Option<&str>, _: &str, _: f64) -> Result<String, ProviderError> {
        Err(ProviderError::Unavailable("no provider configured".into()))
    }
}

/// Generic chat-completions client (`POST {base}/chat/completions`).
pub struct LiveProvider {
    agent: ureq::Agent,
    url: String,
    model: String,
    api_key: Option<String>,
}

impl LiveProvider {
    pub fn new(base_url: &str, model: &str, api_key: Option<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .new_agent();
        LiveProvider {
            agent,
            url: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            model: model.to_owned(),
            api_key,
        }
    }
}

fn is_timeout(e: &ureq::Error) -> bool {
    matches!(e, ureq::Error::Timeout(_)) || matches!(e, ureq::Error::Io(io) if io.kind() == std::io::ErrorKind::TimedOut)
}

impl ChatProvider for LiveProvider {
    fn chat(&self, role: Role, model: Option<&str>, prompt: &str, temperature: f64) -> Result<String, ProviderError> {
        let body = serde_json::json!({
            "model": model.unwrap_or(&self.model),
            "temperature": temperature,
            "response_format": {"type": "json_object"},
            "messages": [
                {"role": "system", "content": format!("You are the {role} component of an agent memory engine. Reply with a single JSON object.")},
                {"role": "user", "content": prompt},
            ],
        })
        .to_string();
        let mut req = self.agent.post(&self.url).header("content-type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send(body.as_bytes()).map_err(|e| {
            if is_timeout(&e) {
                ProviderError::Timeout
            } else {
                ProviderError::Unavailable(e.to_string())
            }
        })?;
        if !resp.status().is_success() {
            return Err(ProviderError::Unavailable(format!("HTTP {}", resp.status())));
        }
        let text = resp.body_mut().read_to_string().map_err(|e| {
            if is_timeout(&e) {
                ProviderError::Timeout
            } else {
                ProviderError::Unavailable(e.to_string())
            }
        })?;
        let v: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| ProviderError::Unavailable(format!("bad envelope: {e}")))?;
        v["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| ProviderError::Unavailable("response lacks choices[0].message.content".into()))
    }
}

/// Token bucket; only admission is serialized.
pub struct RateLimiter {
    per_second: f64,
    state: Mutex<(f64, Instant)>,
}

impl RateLimiter {
    pub fn new(per_second: f64) -> Self {
        assert!(per_second > 0.0, "rate must be positive");
        let burst = per_second.max(1.0);
        RateLimiter { per_second, state: Mutex::new((burst, Instant::now())) }
    }

    pub fn acquire(&self) {
        let burst = self.per_second.max(1.0);
        let mut state = self.state.lock();
        let (tokens, last) = &mut *state;
        let now = Instant::now();
        *tokens = (*tokens + now.duration_since(*last).as_secs_f64() * self.per_second).min(burst);
        *last = now;
        if *tokens < 1.0 {
            let wait = (1.0 - *tokens) / self.per_second;
            std::thread::sleep(Duration::from_secs_f64(wait));
            *tokens = 0.0;
            *last = Instant::now();
        } else {
            *tokens -= 1.0;
        }
    }
}

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub repair_retries: usize,
    /// Requests per second; `None` disables limiting.
    pub rate_limit: Option<f64>,
    pub model_overrides: BTreeMap<Role, String>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig { repair_retries: DEFAULT_REPAIR_RETRIES, rate_limit: None, model_overrides: BTreeMap::new() }
    }
}

/// Shareable, thread-safe entry point for all model calls.
pub struct Gateway {
    provider: Arc<dyn ChatProvider>,
    registry: SchemaRegistry,
    config: GatewayConfig,
    limiter: Option<RateLimiter>,
}

impl Gateway {
    pub fn new(provider: Arc<dyn ChatProvider>, config: GatewayConfig) -> Self {
        let limiter = config.rate_limit.map(RateLimiter::new);
        Gateway { provider, registry: SchemaRegistry::standard(), config, limiter }
    }

    pub fn with_provider(provider: impl ChatProvider + 'static) -> Self {
        Self::new(Arc::new(provider), GatewayConfig::default())
    }

    pub fn registry(&self) -> &SchemaRegistry {
        &self.registry
    }

    fn repair_prompt(original: &str, detail: &str) -> String {
        format!(
            "{original}\n\n## Repair\nYour previous reply did not conform to the required JSON schema: {detail}\nReply again with only a JSON object that conforms to the schema."
        )
    }

    /// Sends the request, validating the payload and re-prompting with a repair
    /// instruction up to `repair_retries` times.
    pub fn complete(&self, req: &LlmRequest) -> Result<LlmResponse, GatewayError> {
        if !(0.0..=2.0).contains(&req.temperature) {
            return Err(GatewayError::InvalidRequest(format!("temperature {} outside [0,2]", req.temperature)));
        }
        if !self.registry.contains(&req.response_schema_id) {
            return Err(GatewayError::InvalidRequest(format!("unknown schema `{}`", req.response_schema_id)));
        }
        let model = self.config.model_overrides.get(&req.role).map(String::as_str);
        let attempts = self.config.repair_retries + 1;
        let mut prompt = req.prompt.clone();
        let mut detail = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                prompt = Self::repair_prompt(&req.prompt, &detail);
            }
            if let Some(limiter) = &self.limiter {
                limiter.acquire();
            }
            let raw = self.provider.chat(req.role, model, &prompt, req.temperature)?;
            match serde_json::from_str::<serde_json::Value>(strip_fences(&raw)) {
                Ok(payload) => match self.registry.validate(&req.response_schema_id, &payload) {
                    Ok(()) => return Ok(LlmResponse { payload, raw }),
                    Err(d) => detail = d.unwrap_or_default(),
                },
                Err(e) => detail = format!("malformed JSON: {e}"),
            }
            tracing::warn!(role = %req.role, attempt, %detail, "schema violation");
        }
        Err(GatewayError::SchemaViolation { schema_id: req.response_schema_id.clone(), attempts, detail })
    }

    /// Typed convenience over [`Gateway::complete`].
    pub fn call<T: DeserializeOwned>(&self, role: Role, prompt: &str) -> Result<T, GatewayError> {
        let resp = self.complete(&LlmRequest::new(role, prompt))?;
        serde_json::from_value(resp.payload).map_err(|e| GatewayError::SchemaViolation {
            schema_id: role.schema_id().to_owned(),
            attempts: 1,
            detail: e.to_string(),
        })
    }
}

/// Tolerates replies wrapped in a Markdown code fence.
fn strip_fences(raw: &str) -> &str {
    let t = raw.trim();
    if let Some(rest) = t.strip_prefix("```") {
        let rest = rest.trim_start_matches("json");
        if let Some(body) = rest.strip_suffix("```") {
            return body.trim();
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Canned {
        replies: Vec<&'static str>,
        calls: AtomicUsize,
        prompts: Mutex<Vec<String>>,
    }

    impl ChatProvider for Canned {
        fn chat(&self, _: Role, _: Option<&str>, prompt: &str, _: f64) -> Result<String, ProviderError> {
            self.prompts.lock().push(prompt.to_owned());
            let i = self.calls.fetch_add(1, Ordering::SeqCst);
            Ok(self.replies[i.min(self.replies.len() - 1)].to_owned())
        }
    }

    fn canned(replies: Vec<&'static str>) -> Arc<Canned> {
        Arc::new(Canned { replies, calls: AtomicUsize::new(0), prompts: Mutex::new(vec![]) })
    }

    #[test]
    fn scripted_is_deterministic() {
        let mut script = ScriptFile::new();
        script.insert(Role::Generalizer, "p", json!({"generalized": "Retrieve credentials"}));
        let gw = Gateway::with_provider(ScriptedProvider::new(script));
        let req = LlmRequest::new(Role::Generalizer, "p");
        let a = gw.complete(&req).unwrap();
        let b = gw.complete(&req).unwrap();
        assert_eq!(a.raw, b.raw);
        assert_eq!(a.payload, json!({"generalized": "Retrieve credentials"}));
    }

    #[test]
    fn scripted_unmatched_errors_loudly() {
        let gw = Gateway::with_provider(ScriptedProvider::new(ScriptFile::new()));
        let err = gw.complete(&LlmRequest::new(Role::Segmenter, "unknown")).unwrap_err();
        match err {
            GatewayError::ProviderUnavailable(msg) => assert!(msg.contains(&prompt_sha256("unknown"))),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn repair_then_success() {
        let p = canned(vec!["not json", "{\"generalized\": \"Mark task complete\"}"]);
        let gw = Gateway::new(p.clone(), GatewayConfig::default());
        let out: crate::schema::GeneralizerPayload = gw.call(Role::Generalizer, "describe").unwrap();
        assert_eq!(out.generalized, "Mark task complete");
        let prompts = p.prompts.lock();
        assert_eq!(prompts.len(), 2);
        assert!(prompts[1].starts_with("describe\n\n## Repair"));
    }

    #[test]
    fn malformed_after_retries_is_schema_violation() {
        let p = canned(vec!["{oops", "still {not json"]);
        let gw = Gateway::new(p.clone(), GatewayConfig::default());
        let err = gw.complete(&LlmRequest::new(Role::Generalizer, "x")).unwrap_err();
        assert!(matches!(err, GatewayError::SchemaViolation { attempts: 3, .. }));
        assert_eq!(p.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn rejects_bad_temperature_and_schema() {
        let gw = Gateway::with_provider(UnavailableProvider);
        let mut req = LlmRequest::new(Role::Generalizer, "x");
        req.temperature = 2.5;
        assert!(matches!(gw.complete(&req), Err(GatewayError::InvalidRequest(_))));
        req.temperature = 0.0;
        req.response_schema_id = "nope".into();
        assert!(matches!(gw.complete(&req), Err(GatewayError::InvalidRequest(_))));
    }

    #[test]
    fn strips_code_fences() {
        assert_eq!(strip_fences("```json\n{\"a\":1}\n```"), "{\"a\":1}");
        assert_eq!(strip_fences(" {\"a\":1} "), "{\"a\":1}");
    }

    #[test]
    fn rate_limiter_spaces_admissions() {
        let limiter = RateLimiter::new(20.0);
        let start = Instant::now();
        for _ in 0..25 {
            limiter.acquire();
        }
        // 20 burst tokens, then 5 more at 20/s.
        assert!(start.elapsed() >= Duration::from_millis(200));
    }

    #[test]
    fn script_file_round_trips() {
        let mut s = ScriptFile::new();
        s.insert(Role::Segmenter, "a", json!({"subtasks": []}));
        let back: ScriptFile = serde_json::from_str(&s.to_pretty_json()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.len(), 1);
    }
}
