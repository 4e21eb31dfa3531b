//! Provider-agnostic chat completion with a persistent response cache, retries and an
//! in-flight bound.

mod cache;
mod http;
mod mock;

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cache::{CacheEntry, ResponseCache};
pub use http::{HttpChatProvider, HttpProviderConfig};
pub use mock::{synthetic_reply, Matcher, MockProvider, MockRule, Reply};

use crate::error::ConfigError;

/// Default sampling temperature for generation prompts.
pub const GENERATION_TEMPERATURE: f64 = 0.7;
/// Temperature for label-prediction prompts; audits should be stable.
pub const AUDIT_TEMPERATURE: f64 = 0.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompletionRequest {
    pub provider: String,
    pub model: String,
    pub system: Option<String>,
    pub user: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl CompletionRequest {
    pub fn new(provider: impl Into<String>, model: impl Into<String>, user: impl Into<String>) -> Self {
        CompletionRequest {
            provider: provider.into(),
            model: model.into(),
            system: None,
            user: user.into(),
            temperature: GENERATION_TEMPERATURE,
            max_tokens: 512,
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn with_max_tokens(mut self, max_tokens: u32) -> Self {
        self.max_tokens = max_tokens;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.user.trim().is_empty() {
            return Err(ConfigError::Invalid("completion prompt is empty".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(ConfigError::Invalid(format!("temperature {} outside [0, 2]", self.temperature)));
        }
        if self.max_tokens == 0 {
            return Err(ConfigError::Invalid("max_tokens must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompletionResponse {
    pub text: String,
    pub cached: bool,
    /// Cache lookup time when `cached`, otherwise wall time of the successful provider call.
    pub latency_ms: u64,
}

/// Failure reported by a provider for a single call.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProviderError {
    #[error("transient provider failure (status {status:?}): {message}")]
    Transient { status: Option<u16>, message: String },
    #[error("provider rejected request (status {status:?}): {message}")]
    Fatal { status: Option<u16>, message: String },
}

impl ProviderError {
    pub fn status(&self) -> Option<u16> {
        match self {
            ProviderError::Transient { status, .. } | ProviderError::Fatal { status, .. } => *status,
        }
    }
}

/// Anything that can answer a chat completion.
pub trait Provider: Send + Sync {
    fn name(&self) -> &str;
    fn complete(&self, request: &CompletionRequest) -> Result<String, ProviderError>;
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("provider `{provider}` failed after {attempts} attempts (last status {status:?}): {message}")]
    RetriesExhausted { provider: String, attempts: u32, status: Option<u16>, message: String },
    #[error("provider `{provider}` rejected the request (status {status:?}): {message}")]
    Rejected { provider: String, status: Option<u16>, message: String },
    #[error("cache: {0}")]
    Cache(#[from] std::io::Error),
}

/// Hex SHA-256 over the request fields and the attempt index.
pub fn cache_key(request: &CompletionRequest, attempt_index: u32) -> String {
    #[derive(Serialize)]
    struct KeyFields<'a> {
        provider: &'a str,
        model: &'a str,
        system: Option<&'a str>,
        user: &'a str,
        temperature: f64,
        max_tokens: u32,
        attempt_index: u32,
    }
    let fields = KeyFields {
        provider: &request.provider,
        model: &request.model,
        system: request.system.as_deref(),
        user: &request.user,
        temperature: request.temperature,
        max_tokens: request.max_tokens,
        attempt_index,
    };
    let canonical = serde_json::to_vec(&fields).expect("key fields serialize");
    hex::encode(Sha256::digest(&canonical))
}

/// Hex SHA-256 of a prompt, recorded in provenance.
pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_attempts: 3, base_delay: Duration::from_millis(500), max_delay: Duration::from_secs(20) }
    }
}

impl RetryPolicy {
    pub fn immediate(max_attempts: u32) -> Self {
        RetryPolicy { max_attempts, base_delay: Duration::ZERO, max_delay: Duration::ZERO }
    }

    /// Sleep before retry number `retry` (0-based).
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = 2u32.saturating_pow(retry);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

/// Counting semaphore bounding requests in flight.
struct InFlight {
    limit: usize,
    busy: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn new(limit: usize) -> Self {
        InFlight { limit: limit.max(1), busy: Mutex::new(0), freed: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut busy = self.busy.lock().unwrap();
        while *busy >= self.limit {
            busy = self.freed.wait(busy).unwrap();
        }
        *busy += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.busy.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct GatewayStats {
    pub live_calls: u64,
    pub cache_hits: u64,
    pub failed_calls: u64,
}

/// Routes requests to registered providers, with caching and retries.
pub struct Gateway {
    providers: HashMap<String, Arc<dyn Provider>>,
    cache: Option<ResponseCache>,
    retry: RetryPolicy,
    in_flight: InFlight,
    // One lock per cache key so concurrent identical requests make a single live call.
    key_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    live_calls: AtomicU64,
    cache_hits: AtomicU64,
    failed_calls: AtomicU64,
}

impl Gateway {
    pub fn new() -> Self {
        Gateway {
            providers: HashMap::new(),
            cache: None,
            retry: RetryPolicy::default(),
            in_flight: InFlight::new(8),
            key_locks: Mutex::new(HashMap::new()),
            live_calls: AtomicU64::new(0),
            cache_hits: AtomicU64::new(0),
            failed_calls: AtomicU64::new(0),
        }
    }

    pub fn with_provider(mut self, provider: Arc<dyn Provider>) -> Self {
        self.providers.insert(provider.name().to_string(), provider);
        self
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_max_in_flight(mut self, limit: usize) -> Self {
        self.in_flight = InFlight::new(limit);
        self
    }

    pub fn stats(&self) -> GatewayStats {
        GatewayStats {
            live_calls: self.live_calls.load(Ordering::SeqCst),
            cache_hits: self.cache_hits.load(Ordering::SeqCst),
            failed_calls: self.failed_calls.load(Ordering::SeqCst),
        }
    }

    pub fn cache(&self) -> Option<&ResponseCache> {
        self.cache.as_ref()
    }

    /// Completes `request`; `attempt_index` separates cache entries for repeated draws.
    pub fn complete(&self, request: &CompletionRequest, attempt_index: u32) -> Result<CompletionResponse, GatewayError> {
        request.validate()?;
        let provider = self
            .providers
            .get(&request.provider)
            .ok_or_else(|| ConfigError::UnknownProvider(request.provider.clone()))?;

        let Some(cache) = &self.cache else {
            return self.call_with_retries(provider.as_ref(), request);
        };

        let key = cache_key(request, attempt_index);
        let lookup = Instant::now();
        if let Some(text) = cache.get(&key) {
            self.cache_hits.fetch_add(1, Ordering::SeqCst);
            return Ok(CompletionResponse { text, cached: true, latency_ms: lookup.elapsed().as_millis() as u64 });
        }

        let key_lock = {
            let mut locks = self.key_locks.lock().unwrap();
            locks.entry(key.clone()).or_default().clone()
        };
        let _guard = key_lock.lock().unwrap();
        if let Some(text) = cache.get(&key) {
            self.cache_hits.fetch_add(1, Ordering::SeqCst);
            return Ok(CompletionResponse { text, cached: true, latency_ms: lookup.elapsed().as_millis() as u64 });
        }
        let response = self.call_with_retries(provider.as_ref(), request)?;
        cache.insert(&key, &response.text)?;
        Ok(response)
    }

    fn call_with_retries(
        &self,
        provider: &dyn Provider,
        request: &CompletionRequest,
    ) -> Result<CompletionResponse, GatewayError> {
        let attempts = self.retry.max_attempts.max(1);
        let mut last: Option<ProviderError> = None;
        for attempt in 0..attempts {
            if attempt > 0 {
                let delay = self.retry.delay(attempt - 1);
                if !delay.is_zero() {
                    std::thread::sleep(delay);
                }
            }
            let started = Instant::now();
            let result = {
                let _permit = self.in_flight.acquire();
                self.live_calls.fetch_add(1, Ordering::SeqCst);
                provider.complete(request)
            };
            match result {
                Ok(text) => {
                    return Ok(CompletionResponse {
                        text,
                        cached: false,
                        latency_ms: started.elapsed().as_millis() as u64,
                    })
                }
                Err(ProviderError::Fatal { status, message }) => {
                    self.failed_calls.fetch_add(1, Ordering::SeqCst);
                    return Err(GatewayError::Rejected { provider: provider.name().to_string(), status, message });
                }
                Err(e) => {
                    self.failed_calls.fetch_add(1, Ordering::SeqCst);
                    log::warn!("{} attempt {} failed: {e}", provider.name(), attempt + 1);
                    last = Some(e);
                }
            }
        }
        let last = last.expect("at least one attempt ran");
        let (status, message) = match last {
            ProviderError::Transient { status, message } | ProviderError::Fatal { status, message } => {
                (status, message)
            }
        };
        Err(GatewayError::RetriesExhausted { provider: provider.name().to_string(), attempts, status, message })
    }
}

impl Default for Gateway {
    fn default() -> Self {
        Gateway::new()
    }
}
