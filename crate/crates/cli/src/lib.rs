//! `popsynth` command-line front end.

pub mod commands;
pub mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;

use config::{ProviderKind, RunConfig};
use popsynth_core::genpipe::GenError;

/// Process exit status per failure class.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad input: config, files, schema or spec drift. Exit code 1.
    #[error("{0}")]
    Validation(String),
    /// Provider or transport failure, including dead-batch aborts. Exit code 2.
    #[error("{0}")]
    Provider(String),
    /// Internal invariant breach or output I/O failure. Exit code 3.
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Provider(_) => 2,
            CliError::Internal(_) => 3,
        }
    }
}

impl From<GenError> for CliError {
    fn from(e: GenError) -> Self {
        match e {
            GenError::Provider { .. } | GenError::DeadBatchLimit { .. } => {
                CliError::Provider(e.to_string())
            }
            GenError::Io { .. } => CliError::Internal(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "popsynth",
    version,
    about = "Generate survey data with chat models, synthesize tract populations and evaluate them"
)]
pub struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `master_seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides `output_dir`.
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    /// Overrides `provider.kind`.
    #[arg(long, global = true, value_enum)]
    pub provider: Option<ProviderKind>,
    /// Resume the checkpointed generation run with this id.
    #[arg(long, global = true, value_name = "RUN_ID")]
    pub resume: Option<String>,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a survey dataset through the configured provider.
    Generate,
    /// Fit the survey to tract marginals and write a synthetic population.
    Synthesize,
    /// Compare surveys and populations against ground truth and benchmarks.
    Evaluate,
    /// Check the config and every file it references.
    Validate,
}

impl Cli {
    /// Loads the config file and applies flag overrides.
    pub fn resolve_config(&self) -> Result<RunConfig, CliError> {
        let path = self
            .config
            .as_ref()
            .ok_or_else(|| CliError::Validation("--config is required".into()))?;
        let mut cfg = RunConfig::load(path)?;
        if let Some(seed) = self.seed {
            cfg.master_seed = Some(seed);
        }
        if let Some(dir) = &self.output_dir {
            cfg.output_dir = dir.clone();
        }
        if let Some(kind) = self.provider {
            cfg.provider.kind = kind;
        }
        Ok(cfg)
    }
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let cfg = cli.resolve_config()?;
    match cli.command {
        Command::Generate => commands::generate(&cfg, cli.resume.as_deref()),
        Command::Synthesize => commands::synthesize(&cfg),
        Command::Evaluate => commands::evaluate(&cfg),
        Command::Validate => commands::validate(&cfg),
    }
}

pub fn main_with(cli: Cli) -> ExitCode {
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp(None)
        .init();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
