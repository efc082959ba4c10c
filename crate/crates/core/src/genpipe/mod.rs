//! Batched, checkpointed generation of survey records through a
//! chat-completion provider.
//!
//! One batch is: build the prompt, request a structured-output completion,
//! salvage whatever complete rows the payload holds, drop every row that
//! fails codebook validation and append the survivors to the checkpoint.
//! Batches repeat until the target sample size is reached.

mod checkpoint;
#[cfg(feature = "http")]
mod http;
mod parse;
mod prompt;
mod provider;
mod run;

pub use checkpoint::{CheckpointState, CheckpointStore};
#[cfg(feature = "http")]
pub use http::{GeminiCompatible, HttpProviderConfig, OpenAiCompatible};
pub use parse::{parse_and_validate_batch, ParsedBatch};
pub use prompt::{build_prompt, record_schema, DEFAULT_PROMPT_TEMPLATE};
pub use provider::{
    request_batch, CompletionRequest, MockProvider, MockReply, ProviderClient, ProviderError,
    RetryPolicy,
};
pub use run::{resume_generation, run_generation, GenerationOptions, GenerationOutput, RunSummary};

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codebook::Codebook;

/// Records requested per provider call.
pub const DEFAULT_BATCH_SIZE: usize = 75;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub frequency_penalty: f64,
    pub presence_penalty: f64,
    pub max_output_tokens: u32,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams {
            temperature: 1.0,
            top_p: 1.0,
            frequency_penalty: 0.0,
            presence_penalty: 0.0,
            max_output_tokens: 32_768,
        }
    }
}

impl SamplingParams {
    pub fn validate(&self) -> Result<(), GenError> {
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(GenError::InvalidSpec(format!(
                "temperature {} < 0",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(GenError::InvalidSpec(format!(
                "top_p {} outside (0, 1]",
                self.top_p
            )));
        }
        if self.max_output_tokens == 0 {
            return Err(GenError::InvalidSpec(
                "max_output_tokens must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerationSpec {
    pub state_name: String,
    pub year: i32,
    pub target_n: usize,
    pub batch_size: usize,
    pub codebook: Arc<Codebook>,
    pub sampling: SamplingParams,
    pub prompt_template: String,
}

impl GenerationSpec {
    /// Spec with the default template, batch size and sampling parameters.
    pub fn new(
        state_name: impl Into<String>,
        year: i32,
        target_n: usize,
        codebook: Arc<Codebook>,
    ) -> Self {
        GenerationSpec {
            state_name: state_name.into(),
            year,
            target_n,
            batch_size: DEFAULT_BATCH_SIZE,
            codebook,
            sampling: SamplingParams::default(),
            prompt_template: DEFAULT_PROMPT_TEMPLATE.to_string(),
        }
    }

    pub fn validate(&self) -> Result<(), GenError> {
        if self.target_n == 0 {
            return Err(GenError::InvalidSpec("target_n must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(GenError::InvalidSpec("batch_size must be positive".into()));
        }
        if self.codebook.is_empty() {
            return Err(GenError::InvalidSpec("codebook has no variables".into()));
        }
        self.sampling.validate()?;
        prompt::check_template(&self.prompt_template)
    }

    /// Hex SHA-256 of the canonical JSON form of the spec.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// A provider response kept verbatim, malformed or not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawBatch {
    pub payload: String,
    #[serde(default)]
    pub provider_meta: BTreeMap<String, serde_json::Value>,
}

impl RawBatch {
    pub fn new(payload: impl Into<String>) -> Self {
        RawBatch {
            payload: payload.into(),
            provider_meta: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Error)]
pub enum GenError {
    #[error("invalid generation spec: {0}")]
    InvalidSpec(String),
    #[error("prompt template is missing the {{{0}}} placeholder")]
    MissingPlaceholder(String),
    #[error("prompt template placeholder {{{0}}} is not recognised")]
    UnresolvedPlaceholder(String),
    #[error("batch {batch_index}: provider failed after {attempts} attempt(s): {source}")]
    Provider {
        batch_index: u64,
        attempts: u32,
        #[source]
        source: ProviderError,
    },
    #[error("aborted after {streak} consecutive dead batches (limit {limit}); checkpoint kept")]
    DeadBatchLimit { streak: usize, limit: usize },
    #[error("checkpoint digest mismatch: checkpoint has {found}, spec is {expected}")]
    DigestMismatch { expected: String, found: String },
    #[error("checkpoint {run_id} is corrupt: {reason}")]
    CorruptCheckpoint { run_id: String, reason: String },
    #[error("no checkpoint for run {0}")]
    MissingCheckpoint(String),
    #[error("checkpoint for run {0} already exists; resume it instead")]
    CheckpointExists(String),
    #[error("checkpoint I/O at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl GenError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        GenError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
