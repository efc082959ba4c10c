//! Per-run checkpoint directory:
//!
//! ```text
//! <root>/<run-id>/records.csv   append-only accepted records (survey CSV)
//! <root>/<run-id>/meta.json     counters, spec digest, committed byte length
//!                               and SHA-256 of the committed records
//! <root>/<run-id>/raw/          verbatim provider payloads, one per batch
//! ```
//!
//! Records are appended before the metadata is replaced, so bytes past the
//! committed length belong to a batch whose commit never finished and are
//! dropped on load.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::warn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::GenError;
use crate::codebook::{Codebook, SurveyRecord};
use crate::io::{format_row, read_survey, survey_header};

const FORMAT_VERSION: u32 = 1;

/// Resumable generation state.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointState {
    pub run_id: String,
    pub accepted_records: Vec<SurveyRecord>,
    pub rejected_count: usize,
    pub batches_issued: u64,
    pub dead_batches: u64,
    pub dead_streak: usize,
    /// Opaque resumption token: the next batch index.
    pub cursor: String,
    pub spec_digest: String,
}

impl CheckpointState {
    pub fn fresh(run_id: impl Into<String>, spec_digest: impl Into<String>) -> Self {
        CheckpointState {
            run_id: run_id.into(),
            accepted_records: Vec::new(),
            rejected_count: 0,
            batches_issued: 0,
            dead_batches: 0,
            dead_streak: 0,
            cursor: "0".into(),
            spec_digest: spec_digest.into(),
        }
    }

    pub fn next_batch_index(&self) -> u64 {
        self.cursor.parse().unwrap_or(self.batches_issued)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    format_version: u32,
    run_id: String,
    spec_digest: String,
    batches_issued: u64,
    rejected_count: usize,
    dead_batches: u64,
    dead_streak: usize,
    accepted_count: usize,
    cursor: String,
    records_bytes: u64,
    records_sha256: String,
}

#[derive(Debug, Clone)]
pub struct CheckpointStore {
    root: PathBuf,
}

impl CheckpointStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        CheckpointStore { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join(run_id)
    }

    pub fn records_path(&self, run_id: &str) -> PathBuf {
        self.run_dir(run_id).join("records.csv")
    }

    pub fn meta_path(&self, run_id: &str) -> PathBuf {
        self.run_dir(run_id).join("meta.json")
    }

    pub fn exists(&self, run_id: &str) -> bool {
        self.meta_path(run_id).exists()
    }

    /// Starts a new run directory with an empty record log.
    pub fn create(&self, state: &CheckpointState, codebook: &Codebook) -> Result<(), GenError> {
        if self.exists(&state.run_id) {
            return Err(GenError::CheckpointExists(state.run_id.clone()));
        }
        let dir = self.run_dir(&state.run_id);
        fs::create_dir_all(dir.join("raw")).map_err(|e| GenError::io(&dir, e))?;
        let path = self.records_path(&state.run_id);
        fs::write(&path, format!("{}\n", survey_header(codebook, false)))
            .map_err(|e| GenError::io(&path, e))?;
        self.write_meta(state)
    }

    /// Appends newly accepted records and commits the updated counters.
    pub fn append(
        &self,
        state: &CheckpointState,
        new_records: &[SurveyRecord],
        codebook: &Codebook,
    ) -> Result<(), GenError> {
        let path = self.records_path(&state.run_id);
        let mut buf = String::new();
        for rec in new_records {
            let row: Vec<_> = codebook.names().map(|n| rec.values[n]).collect();
            buf.push_str(&format_row(&row));
            buf.push('\n');
        }
        let mut f = OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| GenError::io(&path, e))?;
        f.write_all(buf.as_bytes())
            .and_then(|_| f.sync_data())
            .map_err(|e| GenError::io(&path, e))?;
        self.write_meta(state)
    }

    pub fn save_raw(&self, run_id: &str, batch_index: u64, payload: &str) -> Result<(), GenError> {
        let path = self
            .run_dir(run_id)
            .join("raw")
            .join(format!("batch_{batch_index:06}.txt"));
        fs::write(&path, payload).map_err(|e| GenError::io(&path, e))
    }

    fn write_meta(&self, state: &CheckpointState) -> Result<(), GenError> {
        let records = self.records_path(&state.run_id);
        let bytes = fs::read(&records).map_err(|e| GenError::io(&records, e))?;
        let meta = Meta {
            format_version: FORMAT_VERSION,
            run_id: state.run_id.clone(),
            spec_digest: state.spec_digest.clone(),
            batches_issued: state.batches_issued,
            rejected_count: state.rejected_count,
            dead_batches: state.dead_batches,
            dead_streak: state.dead_streak,
            accepted_count: state.accepted_records.len(),
            cursor: state.cursor.clone(),
            records_bytes: bytes.len() as u64,
            records_sha256: hex::encode(Sha256::digest(&bytes)),
        };
        let path = self.meta_path(&state.run_id);
        let tmp = path.with_extension("json.tmp");
        let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
        fs::write(&tmp, json + "\n").map_err(|e| GenError::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| GenError::io(&path, e))
    }

    /// Loads and verifies a checkpoint against `expected_digest`.
    pub fn load(
        &self,
        run_id: &str,
        codebook: &Arc<Codebook>,
        expected_digest: &str,
    ) -> Result<CheckpointState, GenError> {
        let corrupt = |reason: String| GenError::CorruptCheckpoint {
            run_id: run_id.to_string(),
            reason,
        };
        let meta_path = self.meta_path(run_id);
        if !meta_path.exists() {
            return Err(GenError::MissingCheckpoint(run_id.to_string()));
        }
        let meta_text = fs::read_to_string(&meta_path).map_err(|e| GenError::io(&meta_path, e))?;
        let meta: Meta =
            serde_json::from_str(&meta_text).map_err(|e| corrupt(format!("meta.json: {e}")))?;
        if meta.format_version != FORMAT_VERSION {
            return Err(corrupt(format!(
                "unsupported format version {}",
                meta.format_version
            )));
        }
        if meta.spec_digest != expected_digest {
            return Err(GenError::DigestMismatch {
                expected: expected_digest.to_string(),
                found: meta.spec_digest,
            });
        }
        let records_path = self.records_path(run_id);
        let mut bytes = fs::read(&records_path).map_err(|e| GenError::io(&records_path, e))?;
        let committed = meta.records_bytes as usize;
        if bytes.len() < committed {
            return Err(corrupt(format!(
                "records.csv has {} bytes, {} committed",
                bytes.len(),
                committed
            )));
        }
        if bytes.len() > committed {
            warn!(
                "run {run_id}: dropping {} uncommitted bytes from records.csv",
                bytes.len() - committed
            );
            bytes.truncate(committed);
            let f = OpenOptions::new()
                .write(true)
                .open(&records_path)
                .map_err(|e| GenError::io(&records_path, e))?;
            f.set_len(committed as u64)
                .map_err(|e| GenError::io(&records_path, e))?;
        }
        if hex::encode(Sha256::digest(&bytes)) != meta.records_sha256 {
            return Err(corrupt("records.csv content hash mismatch".into()));
        }
        let dataset = read_survey(&bytes[..], codebook.clone(), run_id)
            .map_err(|e| corrupt(format!("records.csv: {e}")))?;
        if dataset.len() != meta.accepted_count {
            return Err(corrupt(format!(
                "{} records on disk, {} recorded",
                dataset.len(),
                meta.accepted_count
            )));
        }
        Ok(CheckpointState {
            run_id: meta.run_id,
            accepted_records: (0..dataset.len()).map(|i| dataset.record(i)).collect(),
            rejected_count: meta.rejected_count,
            batches_issued: meta.batches_issued,
            dead_batches: meta.dead_batches,
            dead_streak: meta.dead_streak,
            cursor: meta.cursor,
            spec_digest: meta.spec_digest,
        })
    }
}
