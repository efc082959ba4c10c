//! TOML run configuration. Command-line flags override file values.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use popsynth_core::genpipe::SamplingParams;

use crate::CliError;

pub const DEFAULT_KEY_ENV: &str = "POPSYNTH_PROVIDER_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    OpenaiCompatible,
    GeminiCompatible,
    Mock,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Tag used in output file names.
    pub label: String,
    /// Codebook JSON; the built-in BRFSS codebook when absent.
    pub codebook_path: Option<PathBuf>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub master_seed: Option<u64>,
    #[serde(default)]
    pub provider: ProviderConfig,
    #[serde(default)]
    pub generation: GenerationConfig,
    #[serde(default)]
    pub synthesis: SynthesisSection,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub endpoint: Option<String>,
    pub model_id: Option<String>,
    /// Environment variable holding the API key.
    #[serde(default = "default_key_env")]
    pub credentials_env: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    /// Mock only: payload files served by batch index, cycling.
    #[serde(default)]
    pub mock_fixtures: Vec<PathBuf>,
    /// Mock only: every n-th generated row is out of range.
    pub mock_invalid_every: Option<usize>,
}

fn default_key_env() -> String {
    DEFAULT_KEY_ENV.into()
}

fn default_timeout() -> u64 {
    300
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            kind: ProviderKind::Mock,
            endpoint: None,
            model_id: None,
            credentials_env: default_key_env(),
            timeout_secs: default_timeout(),
            mock_fixtures: Vec::new(),
            mock_invalid_every: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub state_name: String,
    pub year: i32,
    pub target_n: usize,
    pub batch_size: usize,
    pub prompt_template_path: Option<PathBuf>,
    pub sampling: SamplingParams,
    pub dead_batch_limit: usize,
    pub parallelism: usize,
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    /// Checkpoint run id; the config label when absent.
    pub run_id: Option<String>,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            state_name: String::new(),
            year: 2023,
            target_n: 0,
            batch_size: popsynth_core::genpipe::DEFAULT_BATCH_SIZE,
            prompt_template_path: None,
            sampling: SamplingParams::default(),
            dead_batch_limit: 10,
            parallelism: 1,
            max_retries: 5,
            initial_backoff_ms: 1000,
            run_id: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisSection {
    /// Survey to fit; `survey_<label>.csv` in the output directory when absent.
    pub survey_path: Option<PathBuf>,
    pub marginals_path: Option<PathBuf>,
    pub fitting_variables: Vec<String>,
    pub tolerance: f64,
    pub max_sweeps: usize,
    pub sequential: bool,
}

impl Default for SynthesisSection {
    fn default() -> Self {
        SynthesisSection {
            survey_path: None,
            marginals_path: None,
            fitting_variables: popsynth_core::ipf::DEFAULT_FITTING_VARIABLES
                .iter()
                .map(|s| s.to_string())
                .collect(),
            tolerance: 1e-6,
            max_sweeps: 100,
            sequential: false,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub ground_truth_path: Option<PathBuf>,
    /// Rows of the divergence tables; every codebook variable when empty.
    pub variables: Vec<String>,
    pub candidates: Vec<CandidateConfig>,
    pub benchmarks: Vec<BenchmarkConfig>,
}

/// A model under evaluation: its generated survey (pre-synthesis) and/or
/// its synthetic population (post-synthesis).
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateConfig {
    pub label: String,
    pub survey_path: Option<PathBuf>,
    pub population_path: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    /// Name used in output files.
    pub name: String,
    pub path: PathBuf,
    /// Where the benchmark comes from, e.g. `ACS 2023`.
    pub source: Option<String>,
    pub variable: String,
    pub positive_codes: Vec<i64>,
    pub outcome_label: String,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))
    }

    /// Loads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Validation(format!("cannot read config {}: {e}", path.display()))
        })?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        cfg.rebase(&base);
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let fix_opt = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                fix(p);
            }
        };
        fix_opt(&mut self.codebook_path);
        fix(&mut self.output_dir);
        self.provider.mock_fixtures.iter_mut().for_each(fix);
        fix_opt(&mut self.generation.prompt_template_path);
        fix_opt(&mut self.synthesis.survey_path);
        fix_opt(&mut self.synthesis.marginals_path);
        fix_opt(&mut self.evaluation.ground_truth_path);
        for c in &mut self.evaluation.candidates {
            fix_opt(&mut c.survey_path);
            fix_opt(&mut c.population_path);
        }
        for b in &mut self.evaluation.benchmarks {
            fix(&mut b.path);
        }
    }

    pub fn run_id(&self) -> String {
        self.generation
            .run_id
            .clone()
            .unwrap_or_else(|| self.label.clone())
    }

    pub fn survey_output(&self) -> PathBuf {
        self.output_dir.join(format!("survey_{}.csv", self.label))
    }

    pub fn population_output(&self) -> PathBuf {
        self.output_dir
            .join(format!("population_{}.csv", self.label))
    }

    pub fn checkpoint_root(&self) -> PathBuf {
        self.output_dir.join("checkpoints")
    }
}

/// Fails when `path` does not exist, naming the config key.
pub fn require_file(key: &str, path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Validation(format!(
            "{key}: {} does not exist",
            path.display()
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_defaults() {
        let cfg = RunConfig::from_toml("label = \"x\"\nmaster_seed = 3\n").unwrap();
        assert_eq!(cfg.provider.kind, ProviderKind::Mock);
        assert_eq!(cfg.generation.batch_size, 75);
        assert_eq!(cfg.synthesis.fitting_variables.len(), 5);
        assert_eq!(cfg.synthesis.max_sweeps, 100);
        assert_eq!(cfg.run_id(), "x");
    }

    #[test]
    fn full_config_parses() {
        let cfg = RunConfig::from_toml(
            r#"
            label = "co_gpt"
            master_seed = 1
            output_dir = "runs"

            [provider]
            kind = "openai-compatible"
            endpoint = "https://api.example.com/v1"
            model_id = "gpt-x"

            [generation]
            state_name = "Colorado"
            target_n = 6220
            sampling = { temperature = 1.0, top_p = 1.0 }

            [synthesis]
            marginals_path = "marginals.csv"

            [evaluation]
            ground_truth_path = "truth.csv"

            [[evaluation.candidates]]
            label = "GPT"
            survey_path = "survey_co_gpt.csv"

            [[evaluation.benchmarks]]
            name = "insurance"
            path = "acs.csv"
            variable = "insurance"
            positive_codes = [1, 2, 3]
            outcome_label = "insured"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.provider.kind, ProviderKind::OpenaiCompatible);
        assert_eq!(cfg.generation.sampling.max_output_tokens, 32768);
        assert_eq!(cfg.evaluation.benchmarks[0].positive_codes, vec![1, 2, 3]);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("label = \"x\"\nseed = 1\n").is_err());
    }
}
