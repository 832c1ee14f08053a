//! Chat-completion backends, retry and usage accounting, and the prompt
//! template registry.

mod http;
mod mock;
mod template;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use http::HttpLlm;
pub use mock::{MockLlm, MockScript};
pub use template::{render, template_hashes, Bindings, PromptTemplate, TemplateName};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub template: TemplateName,
    pub text: String,
    pub max_output_tokens: usize,
    pub temperature: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub backend: String,
    #[serde(default)]
    pub truncated: bool,
}

/// One attempt at a completion. Retries live in [`LlmClient`].
pub trait LlmBackend: Send + Sync {
    fn name(&self) -> &str;
    fn call(&self, request: &CompletionRequest) -> Result<CompletionResult>;
}

/// Whitespace token count, used wherever a backend does not report usage.
pub fn count_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    pub fn immediate(max_retries: u32) -> Self {
        Self {
            max_retries,
            base_delay: Duration::ZERO,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageSnapshot {
    pub calls: u64,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub calls_by_template: BTreeMap<String, u64>,
}

/// Token and call accounting shared across threads.
#[derive(Debug, Default)]
pub struct UsageMeter {
    calls: AtomicU64,
    input_tokens: AtomicU64,
    output_tokens: AtomicU64,
    by_template: Mutex<BTreeMap<TemplateName, u64>>,
}

impl UsageMeter {
    fn record(&self, template: TemplateName, result: &CompletionResult) {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.input_tokens.fetch_add(result.input_tokens, Ordering::Relaxed);
        self.output_tokens.fetch_add(result.output_tokens, Ordering::Relaxed);
        *self.by_template.lock().unwrap().entry(template).or_default() += 1;
    }

    pub fn calls_for(&self, template: TemplateName) -> u64 {
        self.by_template
            .lock()
            .unwrap()
            .get(&template)
            .copied()
            .unwrap_or(0)
    }

    pub fn snapshot(&self) -> UsageSnapshot {
        UsageSnapshot {
            calls: self.calls.load(Ordering::Relaxed),
            input_tokens: self.input_tokens.load(Ordering::Relaxed),
            output_tokens: self.output_tokens.load(Ordering::Relaxed),
            calls_by_template: self
                .by_template
                .lock()
                .unwrap()
                .iter()
                .map(|(k, v)| (k.as_str().to_string(), *v))
                .collect(),
        }
    }
}

/// Fixed-window input-token limiter.
#[derive(Debug)]
pub struct RateLimiter {
    tokens_per_minute: u64,
    window: Mutex<(Instant, u64)>,
}

impl RateLimiter {
    pub fn new(tokens_per_minute: u64) -> Self {
        Self {
            tokens_per_minute,
            window: Mutex::new((Instant::now(), 0)),
        }
    }

    pub fn acquire(&self, tokens: u64) {
        loop {
            let wait = {
                let mut w = self.window.lock().unwrap();
                let elapsed = w.0.elapsed();
                if elapsed >= Duration::from_secs(60) {
                    *w = (Instant::now(), 0);
                }
                // A single request larger than the budget is let through alone.
                if w.1 == 0 || w.1 + tokens <= self.tokens_per_minute {
                    w.1 += tokens;
                    return;
                }
                Duration::from_secs(60).saturating_sub(w.0.elapsed())
            };
            thread::sleep(wait);
        }
    }
}

/// Handle used by every pipeline stage to talk to a model.
#[derive(Clone)]
pub struct LlmClient {
    backend: Arc<dyn LlmBackend>,
    pub retry: RetryPolicy,
    pub seed: u64,
    pub max_output_tokens: usize,
    pub temperature_structured: f64,
    pub temperature_prose: f64,
    usage: Arc<UsageMeter>,
    limiter: Option<Arc<RateLimiter>>,
}

impl std::fmt::Debug for LlmClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LlmClient")
            .field("backend", &self.backend.name())
            .field("retry", &self.retry)
            .field("seed", &self.seed)
            .finish_non_exhaustive()
    }
}

impl LlmClient {
    pub fn new(backend: Arc<dyn LlmBackend>) -> Self {
        Self {
            backend,
            retry: RetryPolicy::default(),
            seed: 0,
            max_output_tokens: 4096,
            temperature_structured: 0.0,
            temperature_prose: 0.7,
            usage: Arc::new(UsageMeter::default()),
            limiter: None,
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_rate_limit(mut self, tokens_per_minute: u64) -> Self {
        self.limiter = Some(Arc::new(RateLimiter::new(tokens_per_minute)));
        self
    }

    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    pub fn usage(&self) -> &UsageMeter {
        &self.usage
    }

    /// Renders `template` and completes it.
    pub fn complete(&self, template: TemplateName, bindings: &Bindings) -> Result<CompletionResult> {
        let text = render(template, bindings)?;
        let temperature = if template.is_structured() {
            self.temperature_structured
        } else {
            self.temperature_prose
        };
        self.complete_request(&CompletionRequest {
            template,
            text,
            max_output_tokens: self.max_output_tokens,
            temperature,
            seed: self.seed,
        })
    }

    /// Sends an already rendered request, retrying transport failures with
    /// exponential backoff.
    pub fn complete_request(&self, request: &CompletionRequest) -> Result<CompletionResult> {
        if let Some(limiter) = &self.limiter {
            limiter.acquire(count_tokens(&request.text));
        }
        let max_attempts = self.retry.max_retries + 1;
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.backend.call(request) {
                Ok(mut result) => {
                    truncate_output(&mut result, request.max_output_tokens);
                    self.usage.record(request.template, &result);
                    return Ok(result);
                }
                Err(Error::Transport { message, .. }) => {
                    if attempt >= max_attempts {
                        return Err(Error::Transport {
                            message,
                            attempts: attempt,
                        });
                    }
                    log::warn!(
                        "{} call failed (attempt {attempt}/{max_attempts}): {message}",
                        request.template
                    );
                    let delay = self.retry.base_delay * 2u32.saturating_pow(attempt - 1);
                    if !delay.is_zero() {
                        thread::sleep(delay);
                    }
                }
                Err(other) => return Err(other),
            }
        }
    }
}

fn truncate_output(result: &mut CompletionResult, max_tokens: usize) {
    if result.output_tokens as usize <= max_tokens {
        return;
    }
    let kept: Vec<&str> = result.text.split_whitespace().take(max_tokens).collect();
    let n = kept.len() as u64;
    let text = kept.join(" ");
    result.text = text;
    result.output_tokens = n;
    result.truncated = true;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bindings;

    fn mock_client(mock: MockLlm) -> LlmClient {
        LlmClient::new(Arc::new(mock)).with_retry(RetryPolicy::immediate(2))
    }

    #[test]
    fn mock_is_deterministic() {
        let b = bindings! {"QUERY" => "RAG", "papers" => "### A\nabc"};
        let a = mock_client(MockLlm::new(1))
            .complete(TemplateName::HorizontalSummary, &b)
            .unwrap();
        let c = mock_client(MockLlm::new(1))
            .complete(TemplateName::HorizontalSummary, &b)
            .unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn exhausted_retries_report_attempts() {
        let client = mock_client(MockLlm::new(1).with_script(MockScript {
            fail_first: 3,
            ..Default::default()
        }));
        let err = client
            .complete(TemplateName::QueryExpand, &bindings! {"QUERY" => "x", "n_max" => 3})
            .unwrap_err();
        assert!(matches!(err, Error::Transport { attempts: 3, .. }), "{err}");
    }

    #[test]
    fn retry_recovers_after_transient_failures() {
        let client = mock_client(MockLlm::new(1).with_script(MockScript {
            fail_first: 2,
            ..Default::default()
        }));
        assert!(client
            .complete(TemplateName::QueryExpand, &bindings! {"QUERY" => "x", "n_max" => 3})
            .is_ok());
        assert_eq!(client.usage().snapshot().calls, 1);
    }

    #[test]
    fn long_output_is_truncated_and_flagged() {
        let mut client = mock_client(MockLlm::new(1));
        client.max_output_tokens = 5;
        let r = client
            .complete(TemplateName::HorizontalSummary, &bindings! {"QUERY" => "q", "papers" => "### a"})
            .unwrap();
        assert!(r.truncated);
        assert_eq!(r.output_tokens, 5);
        assert_eq!(r.text.split_whitespace().count(), 5);
    }

    #[test]
    fn usage_sums_over_calls() {
        let client = mock_client(MockLlm::new(3));
        let mut expected_in = 0;
        for q in ["a", "b c", "d e f"] {
            let r = client
                .complete(TemplateName::QueryExpand, &bindings! {"QUERY" => q, "n_max" => 4})
                .unwrap();
            expected_in += r.input_tokens;
        }
        let snap = client.usage().snapshot();
        assert_eq!(snap.calls, 3);
        assert_eq!(snap.input_tokens, expected_in);
        assert_eq!(snap.calls_by_template["query_expand"], 3);
    }

    #[test]
    fn rate_limiter_admits_within_budget() {
        let l = RateLimiter::new(100);
        l.acquire(60);
        l.acquire(40);
    }
}
