use std::fs;

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use super::{
    build_prompt, parse_and_validate_batch, record_schema, request_batch, CheckpointState,
    CheckpointStore, GenError, GenerationSpec, ProviderClient, RawBatch, RetryPolicy,
};
use crate::codebook::SurveyDataset;

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationOptions {
    pub run_id: String,
    pub retry: RetryPolicy,
    /// Consecutive dead batches tolerated before aborting.
    pub dead_batch_limit: usize,
    /// Batches in flight at once.
    pub parallelism: usize,
}

impl GenerationOptions {
    pub fn new(run_id: impl Into<String>) -> Self {
        GenerationOptions {
            run_id: run_id.into(),
            retry: RetryPolicy::default(),
            dead_batch_limit: 10,
            parallelism: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub provider: String,
    pub spec_digest: String,
    pub target_n: usize,
    pub batches_issued: u64,
    /// Valid rows received, before truncation to `target_n`.
    pub accepted_total: usize,
    pub rejected_total: usize,
    pub acceptance_rate: f64,
    pub dead_batches: u64,
    pub records_returned: usize,
    pub resumed: bool,
}

#[derive(Debug, Clone)]
pub struct GenerationOutput {
    pub dataset: SurveyDataset,
    pub summary: RunSummary,
}

/// Starts a fresh run under `options.run_id`; an existing checkpoint for
/// that id is an error.
pub fn run_generation(
    spec: &GenerationSpec,
    provider: &dyn ProviderClient,
    store: &CheckpointStore,
    options: &GenerationOptions,
) -> Result<GenerationOutput, GenError> {
    spec.validate()?;
    if store.exists(&options.run_id) {
        return Err(GenError::CheckpointExists(options.run_id.clone()));
    }
    let state = CheckpointState::fresh(&options.run_id, spec.digest());
    store.create(&state, &spec.codebook)?;
    drive(spec, provider, store, options, state, false)
}

/// Continues the checkpointed run `options.run_id`.
pub fn resume_generation(
    store: &CheckpointStore,
    spec: &GenerationSpec,
    provider: &dyn ProviderClient,
    options: &GenerationOptions,
) -> Result<GenerationOutput, GenError> {
    spec.validate()?;
    let state = store.load(&options.run_id, &spec.codebook, &spec.digest())?;
    info!(
        "resuming run {} at batch {} with {} accepted records",
        state.run_id,
        state.next_batch_index(),
        state.accepted_records.len()
    );
    drive(spec, provider, store, options, state, true)
}

fn issue_wave(
    provider: &dyn ProviderClient,
    prompt: &str,
    schema: &serde_json::Value,
    spec: &GenerationSpec,
    options: &GenerationOptions,
    first: u64,
    n: usize,
) -> Vec<Result<RawBatch, GenError>> {
    let call = |i: u64| {
        request_batch(
            provider,
            prompt,
            schema,
            &spec.sampling,
            i,
            spec.batch_size,
            &options.retry,
        )
    };
    if n == 1 {
        return vec![call(first)];
    }
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..n as u64)
            .map(|k| s.spawn(move || call(first + k)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("batch request thread panicked"))
            .collect()
    })
}

fn drive(
    spec: &GenerationSpec,
    provider: &dyn ProviderClient,
    store: &CheckpointStore,
    options: &GenerationOptions,
    mut state: CheckpointState,
    resumed: bool,
) -> Result<GenerationOutput, GenError> {
    let prompt = build_prompt(spec)?;
    let schema = record_schema(&spec.codebook);
    let limit = options.dead_batch_limit.max(1);
    let codebook = &spec.codebook;

    while state.accepted_records.len() < spec.target_n {
        let remaining = spec.target_n - state.accepted_records.len();
        let wave = options
            .parallelism
            .max(1)
            .min(remaining.div_ceil(spec.batch_size));
        let first = state.next_batch_index();
        for (k, result) in issue_wave(provider, &prompt, &schema, spec, options, first, wave)
            .into_iter()
            .enumerate()
        {
            let index = first + k as u64;
            if state.accepted_records.len() >= spec.target_n {
                debug!("discarding surplus batch {index}");
                break;
            }
            let raw = result?;
            store.save_raw(&state.run_id, index, &raw.payload)?;
            let parsed = parse_and_validate_batch(&raw, codebook);
            state.batches_issued += 1;
            state.cursor = (index + 1).to_string();
            state.rejected_count += parsed.rejected;
            if parsed.dead {
                state.dead_batches += 1;
                state.dead_streak += 1;
                warn!(
                    "batch {index}: no parseable records ({} in a row)",
                    state.dead_streak
                );
            } else {
                state.dead_streak = 0;
                if parsed.truncated {
                    warn!(
                        "batch {index}: truncated payload, salvaged {} rows",
                        parsed.parsed_rows()
                    );
                }
            }
            debug!(
                "batch {index}: {} accepted, {} rejected",
                parsed.accepted.len(),
                parsed.rejected
            );
            state
                .accepted_records
                .extend(parsed.accepted.iter().cloned());
            store.append(&state, &parsed.accepted, codebook)?;
            if state.dead_streak >= limit {
                return Err(GenError::DeadBatchLimit {
                    streak: state.dead_streak,
                    limit,
                });
            }
        }
    }

    let accepted_total = state.accepted_records.len();
    let parsed_total = accepted_total + state.rejected_count;
    let provenance = format!("{} {} {}", provider.model_id(), spec.state_name, spec.year);
    let dataset = SurveyDataset::from_records(
        codebook.clone(),
        &state.accepted_records[..spec.target_n],
        None,
        provenance,
    )
    .map_err(|e| GenError::CorruptCheckpoint {
        run_id: state.run_id.clone(),
        reason: e.to_string(),
    })?;
    let summary = RunSummary {
        run_id: state.run_id.clone(),
        provider: provider.model_id().to_string(),
        spec_digest: state.spec_digest.clone(),
        target_n: spec.target_n,
        batches_issued: state.batches_issued,
        accepted_total,
        rejected_total: state.rejected_count,
        acceptance_rate: if parsed_total == 0 {
            0.0
        } else {
            accepted_total as f64 / parsed_total as f64
        },
        dead_batches: state.dead_batches,
        records_returned: dataset.len(),
        resumed,
    };
    let path = store.run_dir(&state.run_id).join("summary.json");
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    fs::write(&path, json + "\n").map_err(|e| GenError::io(&path, e))?;
    info!(
        "run {}: {} batches, acceptance rate {:.3}, {} dead",
        summary.run_id, summary.batches_issued, summary.acceptance_rate, summary.dead_batches
    );
    Ok(GenerationOutput { dataset, summary })
}
