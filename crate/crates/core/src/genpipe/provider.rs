use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};
use thiserror::Error;

use super::{GenError, RawBatch, SamplingParams};
use crate::codebook::Codebook;

/// Everything a provider needs for one structured-output call.
#[derive(Debug, Clone, Copy)]
pub struct CompletionRequest<'a> {
    pub prompt: &'a str,
    pub schema: &'a Value,
    pub params: &'a SamplingParams,
    pub batch_index: u64,
    pub n_rows: usize,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ProviderError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("provider refused the request: {0}")]
    Refusal(String),
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("unexpected response shape: {0}")]
    BadResponse(String),
}

impl ProviderError {
    /// Transport failures, rate limiting and server errors are retried.
    pub fn is_retryable(&self) -> bool {
        match self {
            ProviderError::Transport(_) => true,
            ProviderError::Http { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

/// Chat-completion backend: prompt + schema + sampling in, raw payload out.
pub trait ProviderClient: Send + Sync {
    /// Model or adapter identifier recorded in provenance.
    fn model_id(&self) -> &str;

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<RawBatch, ProviderError>;
}

impl<P: ProviderClient + ?Sized> ProviderClient for Arc<P> {
    fn model_id(&self) -> &str {
        (**self).model_id()
    }

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<RawBatch, ProviderError> {
        (**self).complete(request)
    }
}

impl<P: ProviderClient + ?Sized> ProviderClient for Box<P> {
    fn model_id(&self) -> &str {
        (**self).model_id()
    }

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<RawBatch, ProviderError> {
        (**self).complete(request)
    }
}

/// Exponential backoff for retryable provider errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub initial_backoff: Duration,
    pub max_backoff: Duration,
    pub multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 5,
            initial_backoff: Duration::from_secs(1),
            max_backoff: Duration::from_secs(60),
            multiplier: 2.0,
        }
    }
}

impl RetryPolicy {
    pub fn no_delay(max_retries: u32) -> Self {
        RetryPolicy {
            max_retries,
            initial_backoff: Duration::ZERO,
            max_backoff: Duration::ZERO,
            multiplier: 2.0,
        }
    }

    /// Delay before retry number `retry` (0-based).
    pub fn backoff(&self, retry: u32) -> Duration {
        let secs = self.initial_backoff.as_secs_f64() * self.multiplier.powi(retry as i32);
        Duration::from_secs_f64(secs.min(self.max_backoff.as_secs_f64()))
    }
}

/// Issues one batch request, retrying retryable failures with backoff.
pub fn request_batch(
    provider: &dyn ProviderClient,
    prompt: &str,
    schema: &Value,
    params: &SamplingParams,
    batch_index: u64,
    n_rows: usize,
    policy: &RetryPolicy,
) -> Result<RawBatch, GenError> {
    let request = CompletionRequest {
        prompt,
        schema,
        params,
        batch_index,
        n_rows,
    };
    let mut attempt = 0;
    loop {
        attempt += 1;
        match provider.complete(&request) {
            Ok(raw) => return Ok(raw),
            Err(e) if e.is_retryable() && attempt <= policy.max_retries => {
                let wait = policy.backoff(attempt - 1);
                warn!("batch {batch_index}: attempt {attempt} failed ({e}); retrying in {wait:?}");
                if !wait.is_zero() {
                    std::thread::sleep(wait);
                }
            }
            Err(source) => {
                return Err(GenError::Provider {
                    batch_index,
                    attempts: attempt,
                    source,
                })
            }
        }
    }
}

/// One scripted reply of a [`MockProvider`].
#[derive(Debug, Clone, PartialEq)]
pub enum MockReply {
    Payload(String),
    Fail(ProviderError),
}

#[derive(Debug)]
enum MockMode {
    /// Replies consumed in call order; the last one repeats.
    Script(Vec<MockReply>),
    /// Payloads chosen by batch index, cycling.
    Fixture(Vec<String>),
    /// Seeded random rows; optionally every `invalid_every`-th row (1-based
    /// positions divisible by it) carries an out-of-range code.
    Generator {
        codebook: Arc<Codebook>,
        seed: u64,
        invalid_every: Option<usize>,
    },
}

/// Deterministic offline provider for tests and dry runs.
#[derive(Debug)]
pub struct MockProvider {
    mode: MockMode,
    calls: AtomicU64,
    model_id: String,
}

impl MockProvider {
    pub fn scripted(replies: Vec<MockReply>) -> Self {
        assert!(!replies.is_empty(), "script needs at least one reply");
        Self::with_mode(MockMode::Script(replies))
    }

    pub fn fixture(payloads: Vec<String>) -> Self {
        assert!(!payloads.is_empty(), "fixture needs at least one payload");
        Self::with_mode(MockMode::Fixture(payloads))
    }

    pub fn generator(codebook: Arc<Codebook>, seed: u64) -> Self {
        Self::with_mode(MockMode::Generator {
            codebook,
            seed,
            invalid_every: None,
        })
    }

    /// Generator whose every `n`-th row is invalid.
    pub fn generator_with_invalid(codebook: Arc<Codebook>, seed: u64, n: usize) -> Self {
        Self::with_mode(MockMode::Generator {
            codebook,
            seed,
            invalid_every: Some(n.max(1)),
        })
    }

    fn with_mode(mode: MockMode) -> Self {
        MockProvider {
            mode,
            calls: AtomicU64::new(0),
            model_id: "mock".into(),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    /// Batch payload the generator mode would return; also used to build
    /// fixture files.
    pub fn generated_payload(
        codebook: &Codebook,
        seed: u64,
        batch_index: u64,
        n_rows: usize,
        invalid_every: Option<usize>,
    ) -> String {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ batch_index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let rows: Vec<Value> = (0..n_rows)
            .map(|i| {
                let mut obj = Map::new();
                for var in codebook.variables() {
                    let code = var.codes[rng.random_range(0..var.codes.len())];
                    obj.insert(var.name.clone(), json!(code));
                }
                if invalid_every.is_some_and(|n| (i + 1) % n == 0) {
                    let var = &codebook.variables()[i % codebook.len()];
                    let bad = var.codes.iter().max().copied().unwrap_or(0) + 1000;
                    obj.insert(var.name.clone(), json!(bad));
                }
                Value::Object(obj)
            })
            .collect();
        json!({ "records": rows }).to_string()
    }
}

impl ProviderClient for MockProvider {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<RawBatch, ProviderError> {
        let call = self.calls.fetch_add(1, Ordering::SeqCst);
        let payload = match &self.mode {
            MockMode::Script(replies) => {
                let i = (call as usize).min(replies.len() - 1);
                match &replies[i] {
                    MockReply::Payload(p) => p.clone(),
                    MockReply::Fail(e) => return Err(e.clone()),
                }
            }
            MockMode::Fixture(payloads) => {
                payloads[(request.batch_index % payloads.len() as u64) as usize].clone()
            }
            MockMode::Generator {
                codebook,
                seed,
                invalid_every,
            } => Self::generated_payload(
                codebook,
                *seed,
                request.batch_index,
                request.n_rows,
                *invalid_every,
            ),
        };
        let mut raw = RawBatch::new(payload);
        raw.provider_meta
            .insert("model".into(), json!(self.model_id));
        raw.provider_meta
            .insert("batch_index".into(), json!(request.batch_index));
        Ok(raw)
    }
}
