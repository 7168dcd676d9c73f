//! Chat-completion clients, verdict parsing, response cache and pacing.

mod cache;
mod http;
mod mock;
mod rate;

use std::fmt;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::EmailId;
use crate::prompt::{text_digest, PromptText};
use crate::taxonomy::TechniqueId;

pub use cache::ResponseCache;
#[cfg(feature = "http")]
pub use http::ReqwestTransport;
pub use http::{ChatCompletionsProvider, HttpRequest, HttpResponse, ScriptedTransport, Transport, TransportError};
pub use mock::{MockProvider, MockScript};
pub use rate::{LimiterRegistry, RateLimiter};

/// Binary decision of the classifier, or a refusal to answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Decision {
    Yes,
    No,
    Refusal,
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decision::Yes => "YES",
            Decision::No => "NO",
            Decision::Refusal => "REFUSAL",
        })
    }
}

/// Strict YES/NO reading of a model response. Anything else is a refusal.
pub fn parse_verdict(raw: &str) -> Decision {
    let cleaned = raw
        .trim()
        .trim_end_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
        .trim_start_matches(['\'', '"', '`'])
        .trim();
    if cleaned.eq_ignore_ascii_case("yes") {
        Decision::Yes
    } else if cleaned.eq_ignore_ascii_case("no") {
        Decision::No
    } else {
        Decision::Refusal
    }
}

/// Cache key of a (model, prompt) pair. The model id is length-prefixed so
/// distinct pairs never collide.
pub fn cache_key(model_id: &str, prompt_digest: &str) -> String {
    format!("{}:{}:{}", model_id.len(), model_id, prompt_digest)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub email: EmailId,
    pub technique: TechniqueId,
    pub model_id: String,
    pub decision: Decision,
    pub raw_response: String,
    pub prompt_digest: String,
    pub timestamp: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    /// Any endpoint speaking the chat-completions JSON shape.
    #[default]
    Openai,
    Mock,
}

fn default_timeout() -> u64 {
    60
}
fn default_retries() -> u32 {
    3
}
fn default_rate() -> f64 {
    5.0
}
fn default_backoff() -> u64 {
    500
}
fn default_endpoint() -> String {
    "https://api.openai.com/v1/chat/completions".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub model_id: String,
    #[serde(default)]
    pub provider: ProviderKind,
    #[serde(default = "default_endpoint")]
    pub endpoint: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    /// Environment variable holding the bearer key. No auth header when unset.
    #[serde(default)]
    pub api_key_env: Option<String>,
    /// Requests per second admitted per endpoint; `0` disables pacing.
    #[serde(default = "default_rate")]
    pub rate_limit: f64,
    /// First retry delay; doubles on every further attempt.
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
    /// Script file of the mock provider.
    #[serde(default)]
    pub script: Option<PathBuf>,
}

impl ModelConfig {
    pub fn new(model_id: impl Into<String>, provider: ProviderKind) -> Self {
        ModelConfig {
            model_id: model_id.into(),
            provider,
            endpoint: default_endpoint(),
            temperature: 0.0,
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            api_key_env: None,
            rate_limit: default_rate(),
            backoff_ms: default_backoff(),
            script: None,
        }
    }

    pub fn mock(model_id: impl Into<String>) -> Self {
        let mut c = Self::new(model_id, ProviderKind::Mock);
        c.endpoint = "mock://".into();
        c.rate_limit = 0.0;
        c.backoff_ms = 0;
        c
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelsFile {
    #[serde(rename = "model", default)]
    models: Vec<ModelConfig>,
}

/// Reads a TOML file of `[[model]]` tables.
pub fn load_models(path: &std::path::Path) -> Result<Vec<ModelConfig>, LlmError> {
    let text = std::fs::read_to_string(path).map_err(|e| LlmError::Config(format!("{}: {e}", path.display())))?;
    let file: ModelsFile = toml::from_str(&text).map_err(|e| LlmError::Config(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(std::path::Path::new("."));
    Ok(file
        .models
        .into_iter()
        .map(|mut m| {
            if let Some(s) = &m.script {
                if s.is_relative() {
                    m.script = Some(base.join(s));
                }
            }
            m
        })
        .collect())
}

/// Failure of a single provider call.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ProviderError {
    #[error("rate limited by provider")]
    RateLimited,
    #[error("request timed out")]
    Timeout,
    #[error("transient provider failure: {0}")]
    Transient(String),
    /// Bad credentials, unknown model, malformed request: retrying won't help.
    #[error("provider rejected the request: {0}")]
    Fatal(String),
}

impl ProviderError {
    pub fn is_retryable(&self) -> bool {
        !matches!(self, ProviderError::Fatal(_))
    }
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("model `{model}` failed after {attempts} attempts: {source}")]
    Provider {
        model: String,
        attempts: u32,
        #[source]
        source: ProviderError,
    },
    #[error("model `{model}` timed out after {attempts} attempts")]
    Timeout { model: String, attempts: u32 },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("response cache error: {0}")]
    Cache(#[from] std::io::Error),
}

impl LlmError {
    /// Errors that make further calls to the same model pointless.
    pub fn is_fatal(&self) -> bool {
        matches!(
            self,
            LlmError::Config(_)
                | LlmError::Provider {
                    source: ProviderError::Fatal(_),
                    ..
                }
        )
    }
}

/// One chat-completion backend.
pub trait Provider: Send + Sync {
    fn send(&self, config: &ModelConfig, prompt: &str) -> Result<String, ProviderError>;
}

/// Builds the provider described by `config`.
pub fn provider_for(config: &ModelConfig) -> Result<Arc<dyn Provider>, LlmError> {
    match config.provider {
        ProviderKind::Mock => {
            let script = match &config.script {
                Some(path) => MockScript::load(path)?,
                None => MockScript::default(),
            };
            Ok(Arc::new(MockProvider::new(script)))
        }
        #[cfg(feature = "http")]
        ProviderKind::Openai => {
            let key = match &config.api_key_env {
                Some(var) => Some(std::env::var(var).map_err(|_| {
                    LlmError::Config(format!("environment variable {var} is not set (model {})", config.model_id))
                })?),
                None => None,
            };
            let transport = ReqwestTransport::new().map_err(LlmError::Config)?;
            Ok(Arc::new(ChatCompletionsProvider::new(transport, key)))
        }
        #[cfg(not(feature = "http"))]
        ProviderKind::Openai => Err(LlmError::Config("built without the `http` feature".into())),
    }
}

#[derive(Debug, Default)]
pub struct ClientStats {
    pub calls: AtomicU64,
    pub retries: AtomicU64,
    pub cache_hits: AtomicU64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub cached: bool,
    pub retries: u32,
}

/// Cached, paced and retrying client for one model.
pub struct LlmClient {
    config: ModelConfig,
    provider: Arc<dyn Provider>,
    cache: Arc<ResponseCache>,
    limiter: Arc<RateLimiter>,
    stats: ClientStats,
}

impl LlmClient {
    pub fn new(
        config: ModelConfig,
        provider: Arc<dyn Provider>,
        cache: Arc<ResponseCache>,
        limiter: Arc<RateLimiter>,
    ) -> Self {
        if config.temperature != 0.0 {
            tracing::warn!(
                model = %config.model_id,
                temperature = config.temperature,
                "non-zero temperature: verdicts will not be reproducible"
            );
        }
        LlmClient {
            config,
            provider,
            cache,
            limiter,
            stats: ClientStats::default(),
        }
    }

    /// Client with its own provider, no persistent cache and a private limiter.
    pub fn from_config(config: ModelConfig) -> Result<Self, LlmError> {
        let provider = provider_for(&config)?;
        let limiter = Arc::new(RateLimiter::new(config.rate_limit));
        Ok(Self::new(config, provider, Arc::new(ResponseCache::in_memory()), limiter))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn model_id(&self) -> &str {
        &self.config.model_id
    }

    pub fn stats(&self) -> &ClientStats {
        &self.stats
    }

    pub fn complete(&self, prompt: &PromptText) -> Result<Completion, LlmError> {
        self.complete_raw(&prompt.text, &prompt.digest)
    }

    pub fn complete_text(&self, text: &str) -> Result<Completion, LlmError> {
        self.complete_raw(text, &text_digest(text))
    }

    fn complete_raw(&self, text: &str, digest: &str) -> Result<Completion, LlmError> {
        let key = cache_key(&self.config.model_id, digest);
        if let Some(hit) = self.cache.get(&key) {
            self.stats.cache_hits.fetch_add(1, Ordering::Relaxed);
            return Ok(Completion {
                text: hit,
                cached: true,
                retries: 0,
            });
        }
        let mut retries = 0u32;
        loop {
            self.limiter.acquire();
            self.stats.calls.fetch_add(1, Ordering::Relaxed);
            match self.provider.send(&self.config, text) {
                Ok(response) => {
                    self.cache.insert(&key, &self.config.model_id, digest, &response)?;
                    return Ok(Completion {
                        text: response,
                        cached: false,
                        retries,
                    });
                }
                Err(err) if err.is_retryable() && retries < self.config.max_retries => {
                    let delay = self.backoff(retries);
                    tracing::debug!(model = %self.config.model_id, %err, retry = retries + 1, ?delay, "retrying");
                    retries += 1;
                    self.stats.retries.fetch_add(1, Ordering::Relaxed);
                    if !delay.is_zero() {
                        std::thread::sleep(delay);
                    }
                }
                Err(ProviderError::Timeout) => {
                    return Err(LlmError::Timeout {
                        model: self.config.model_id.clone(),
                        attempts: retries + 1,
                    })
                }
                Err(source) => {
                    return Err(LlmError::Provider {
                        model: self.config.model_id.clone(),
                        attempts: retries + 1,
                        source,
                    })
                }
            }
        }
    }

    fn backoff(&self, retry: u32) -> Duration {
        let ms = self.config.backoff_ms.saturating_mul(1u64 << retry.min(16));
        Duration::from_millis(ms.min(30_000))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    #[test]
    fn verdict_parsing() {
        assert_eq!(parse_verdict("YES"), Decision::Yes);
        assert_eq!(parse_verdict("no."), Decision::No);
        assert_eq!(parse_verdict("  Yes!\n"), Decision::Yes);
        assert_eq!(parse_verdict("'NO'"), Decision::No);
        assert_eq!(parse_verdict("I cannot help with that request"), Decision::Refusal);
        assert_eq!(parse_verdict("YES, because"), Decision::Refusal);
        assert_eq!(parse_verdict(""), Decision::Refusal);
        assert_eq!(parse_verdict("yesno"), Decision::Refusal);
    }

    #[test]
    fn cache_keys() {
        assert_eq!(cache_key("m", "d"), cache_key("m", "d"));
        assert_ne!(cache_key("m1", "d"), cache_key("m2", "d"));
        assert_ne!(cache_key("m", "d1"), cache_key("m", "d2"));
        assert_ne!(cache_key("a:b", "c"), cache_key("a", "b:c"));
    }

    struct Flaky {
        script: Mutex<Vec<Result<String, ProviderError>>>,
        calls: AtomicU64,
    }

    impl Provider for Flaky {
        fn send(&self, _: &ModelConfig, _: &str) -> Result<String, ProviderError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.script.lock().unwrap().remove(0)
        }
    }

    fn client(script: Vec<Result<String, ProviderError>>, retries: u32) -> (LlmClient, Arc<Flaky>) {
        let p = Arc::new(Flaky {
            script: Mutex::new(script),
            calls: AtomicU64::new(0),
        });
        let mut cfg = ModelConfig::mock("m");
        cfg.max_retries = retries;
        let c = LlmClient::new(cfg, p.clone(), Arc::new(ResponseCache::in_memory()), Arc::new(RateLimiter::unlimited()));
        (c, p)
    }

    #[test]
    fn cache_hit_skips_provider() {
        let (c, p) = client(vec![Ok("YES".into())], 0);
        let first = c.complete_text("prompt").unwrap();
        let second = c.complete_text("prompt").unwrap();
        assert_eq!(first.text, second.text);
        assert!(!first.cached && second.cached);
        assert_eq!(p.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn fatal_errors_are_not_retried() {
        let (c, p) = client(vec![Err(ProviderError::Fatal("401".into()))], 3);
        let err = c.complete_text("x").unwrap_err();
        assert!(err.is_fatal());
        assert_eq!(p.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn retry_budget_exhausts() {
        let (c, p) = client(vec![Err(ProviderError::Timeout), Err(ProviderError::Timeout), Ok("NO".into())], 1);
        assert!(matches!(c.complete_text("x"), Err(LlmError::Timeout { attempts: 2, .. })));
        assert_eq!(p.calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn models_file_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("models.toml");
        std::fs::write(
            &path,
            "[[model]]\nmodel_id = \"gpt-4o-mini\"\napi_key_env = \"OPENAI_API_KEY\"\n\n[[model]]\nmodel_id = \"mock\"\nprovider = \"mock\"\nscript = \"script.toml\"\n",
        )
        .unwrap();
        let models = load_models(&path).unwrap();
        assert_eq!(models.len(), 2);
        assert_eq!(models[0].temperature, 0.0);
        assert_eq!(models[0].max_retries, 3);
        assert_eq!(models[0].rate_limit, 5.0);
        assert_eq!(models[1].provider, ProviderKind::Mock);
        assert_eq!(models[1].script.as_deref(), Some(dir.path().join("script.toml").as_path()));
    }
}
