//! Chat-completions transport with retries, rate limiting and a persistent
//! content-addressed response cache.
//!
//! The network sits behind [`Transport`] and time behind [`Clock`], so every
//! behaviour here (backoff, rate limits, cache hits) can be exercised offline.

mod cache;
mod ratelimit;
mod transport;

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use cache::{CacheKey, DiskCache};
pub use ratelimit::{Clock, RateLimiter, SystemClock, VirtualClock, WINDOW};
pub use transport::{HttpRequest, HttpResponse, HttpTransport, Transport, TransportFailure};

use crate::schemas::ChatRequest;

pub const BACKOFF_BASE: Duration = Duration::from_secs(1);
pub const BACKOFF_CAP: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClientConfig {
    /// Endpoint root; requests go to `{base_url}/chat/completions`.
    pub base_url: String,
    pub model_id: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env_var: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub requests_per_minute: u32,
    pub cache_dir: Option<PathBuf>,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".to_string(),
            model_id: "gpt-4.1-nano".to_string(),
            api_key_env_var: "OPENAI_API_KEY".to_string(),
            timeout_secs: 60,
            max_retries: 4,
            requests_per_minute: 500,
            cache_dir: Some(PathBuf::from(".itemdiff-cache")),
        }
    }
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("still rate limited (HTTP 429) after {retries} retries")]
    RateLimitedExhausted { retries: u32 },
    #[error("server error HTTP {status} persisted after {retries} retries")]
    ServerErrorExhausted { status: u16, retries: u32 },
    #[error("transport error after {retries} retries: {source}")]
    Transport {
        retries: u32,
        #[source]
        source: TransportFailure,
    },
    #[error("endpoint returned non-retryable HTTP {0}")]
    NonRetryableStatus(u16),
    #[error("malformed completion response: {0}")]
    MalformedResponse(String),
    #[error("cache write failed: {0}")]
    Io(#[from] std::io::Error),
}

impl ClientError {
    pub fn is_auth(&self) -> bool {
        matches!(self, ClientError::Auth(_))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub total_tokens: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    /// Message content of the first choice.
    pub content: String,
    pub usage: Option<Usage>,
    pub from_cache: bool,
    pub key: CacheKey,
}

#[derive(Debug, Clone)]
enum ApiKey {
    Env(String),
    Fixed(String),
}

/// Shared, thread-safe client for one endpoint.
pub struct Client {
    config: ClientConfig,
    api_key: ApiKey,
    transport: Arc<dyn Transport>,
    clock: Arc<dyn Clock>,
    limiter: Option<RateLimiter>,
    cache: Option<DiskCache>,
}

impl Client {
    /// Client with the real HTTP transport, system clock and the configured cache.
    pub fn new(config: ClientConfig) -> Self {
        let transport = Arc::new(HttpTransport::new(Duration::from_secs(config.timeout_secs.max(1))));
        Self::with_transport(config, transport)
    }

    pub fn with_transport(config: ClientConfig, transport: Arc<dyn Transport>) -> Self {
        let clock: Arc<dyn Clock> = Arc::new(SystemClock::default());
        Self {
            api_key: ApiKey::Env(config.api_key_env_var.clone()),
            limiter: Some(RateLimiter::new(config.requests_per_minute, clock.clone())),
            cache: config.cache_dir.clone().map(DiskCache::new),
            transport,
            clock,
            config,
        }
    }

    pub fn clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.limiter = self.limiter.map(|_| RateLimiter::new(self.config.requests_per_minute, clock.clone()));
        self.clock = clock;
        self
    }

    /// Use this key instead of reading the environment.
    pub fn api_key(mut self, key: impl Into<String>) -> Self {
        self.api_key = ApiKey::Fixed(key.into());
        self
    }

    pub fn without_cache(mut self) -> Self {
        self.cache = None;
        self
    }

    pub fn without_rate_limit(mut self) -> Self {
        self.limiter = None;
        self
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    pub fn cache(&self) -> Option<&DiskCache> {
        self.cache.as_ref()
    }

    pub fn key_for(&self, request: &ChatRequest, prompt_version: &str) -> CacheKey {
        CacheKey::compute(&request.model_id, prompt_version, &request.to_wire_body())
    }

    fn resolve_key(&self) -> Result<String, ClientError> {
        match &self.api_key {
            ApiKey::Fixed(k) => Ok(k.clone()),
            ApiKey::Env(var) => match std::env::var(var) {
                Ok(k) if !k.trim().is_empty() => Ok(k),
                _ => Err(ClientError::Auth(format!("environment variable {var} is not set"))),
            },
        }
    }

    fn backoff(&self, retry: u32) -> Duration {
        let ceiling = BACKOFF_BASE
            .checked_mul(1u32.checked_shl(retry).unwrap_or(u32::MAX))
            .unwrap_or(BACKOFF_CAP)
            .min(BACKOFF_CAP);
        ceiling.mul_f64(rand::random::<f64>())
    }

    /// Send a request, serving it from the cache when possible.
    ///
    /// 429, 5xx and transport failures are retried up to `max_retries` times
    /// with full-jitter exponential backoff. 401/403 fail immediately.
    pub fn complete(&self, request: &ChatRequest, prompt_version: &str) -> Result<Completion, ClientError> {
        let body = request.to_wire_body();
        let key = CacheKey::compute(&request.model_id, prompt_version, &body);

        if let Some(cached) = self.cache.as_ref().and_then(|c| c.lookup(&key)) {
            match parse_completion(&cached) {
                Ok((content, usage)) => return Ok(Completion { content, usage, from_cache: true, key }),
                Err(e) => log::warn!("cached response {key} unusable ({e}); refetching"),
            }
        }

        let api_key = self.resolve_key()?;
        let http = HttpRequest {
            url: format!("{}/chat/completions", self.config.base_url.trim_end_matches('/')),
            headers: vec![
                ("Authorization".into(), format!("Bearer {api_key}")),
                ("Content-Type".into(), "application/json".into()),
            ],
            body,
        };

        let max_retries = self.config.max_retries;
        let mut retry = 0;
        loop {
            if let Some(limiter) = &self.limiter {
                limiter.acquire();
            }
            let outcome = self.transport.send(&http);
            let exhausted = retry >= max_retries;
            let err = match outcome {
                Ok(resp) if (200..300).contains(&resp.status) => {
                    let (content, usage) = parse_completion(&resp.body)?;
                    if let Some(cache) = &self.cache {
                        cache.store(&key, &resp.body)?;
                    }
                    return Ok(Completion { content, usage, from_cache: false, key });
                }
                Ok(resp) if resp.status == 401 || resp.status == 403 => {
                    return Err(ClientError::Auth(format!("endpoint returned HTTP {}", resp.status)));
                }
                Ok(resp) if resp.status == 429 => ClientError::RateLimitedExhausted { retries: retry },
                Ok(resp) if resp.status >= 500 => {
                    ClientError::ServerErrorExhausted { status: resp.status, retries: retry }
                }
                Ok(resp) => return Err(ClientError::NonRetryableStatus(resp.status)),
                Err(source) => ClientError::Transport { retries: retry, source },
            };
            if exhausted {
                return Err(err);
            }
            log::debug!("retryable failure ({err}); attempt {} of {}", retry + 1, max_retries);
            self.clock.sleep(self.backoff(retry));
            retry += 1;
        }
    }
}

/// Extract the first choice's message content and usage from a response body.
pub fn parse_completion(body: &[u8]) -> Result<(String, Option<Usage>), ClientError> {
    let value: Value =
        serde_json::from_slice(body).map_err(|e| ClientError::MalformedResponse(format!("invalid JSON: {e}")))?;
    let message = &value["choices"][0]["message"];
    let content = match &message["content"] {
        Value::String(s) => s.clone(),
        _ => {
            let refusal = message["refusal"].as_str().unwrap_or("no message content");
            return Err(ClientError::MalformedResponse(refusal.to_string()));
        }
    };
    let usage = serde_json::from_value::<Usage>(value["usage"].clone()).ok();
    Ok((content, usage))
}

/// Response body in the chat-completions format carrying `content`.
pub fn completion_body(content: &str) -> Vec<u8> {
    serde_json::to_vec(&serde_json::json!({
        "object": "chat.completion",
        "choices": [{
            "index": 0,
            "finish_reason": "stop",
            "message": {"role": "assistant", "content": content},
        }],
        "usage": {"prompt_tokens": 0, "completion_tokens": 0, "total_tokens": 0},
    }))
    .expect("body serializes")
}
