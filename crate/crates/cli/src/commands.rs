use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use log::{info, warn};
use serde::Serialize;
use serde_json::json;

use popsynth_core::codebook::{Codebook, SurveyDataset};
use popsynth_core::exec::Execution;
use popsynth_core::genpipe::{
    resume_generation, run_generation, CheckpointStore, GeminiCompatible, GenerationOptions,
    GenerationSpec, HttpProviderConfig, MockProvider, OpenAiCompatible, ProviderClient,
    RetryPolicy,
};
use popsynth_core::io;
use popsynth_core::ipf::{
    synthesize_population, ConstraintSet, IpfConfig, SynthesisConfig, SyntheticPopulation,
};
use popsynth_core::metrics::{
    category_residuals, divergence_delta, divergence_table, CategoricalSource, DivergenceTable,
    ResidualReport,
};
use popsynth_core::sae::{sae_report, tract_estimate, OutcomePredicate, SaeSummary};

use crate::config::{require_file, ProviderKind, RunConfig};
use crate::CliError;

fn validation(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

fn write_output(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)
            .map_err(|e| CliError::Internal(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| CliError::Internal(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text =
        serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
    write_output(path, &(text + "\n"))
}

pub fn load_codebook(cfg: &RunConfig) -> Result<Arc<Codebook>, CliError> {
    match &cfg.codebook_path {
        Some(p) => {
            require_file("codebook_path", p)?;
            Codebook::from_path(p).map(Arc::new).map_err(validation)
        }
        None => Ok(Arc::new(Codebook::default_brfss())),
    }
}

fn master_seed(cfg: &RunConfig) -> Result<u64, CliError> {
    cfg.master_seed.ok_or_else(|| {
        CliError::Validation("master_seed must be set in the config or with --seed".into())
    })
}

// ---- generate ---------------------------------------------------------------

pub fn generation_spec(
    cfg: &RunConfig,
    codebook: Arc<Codebook>,
) -> Result<GenerationSpec, CliError> {
    let g = &cfg.generation;
    let mut spec = GenerationSpec::new(g.state_name.clone(), g.year, g.target_n, codebook);
    spec.batch_size = g.batch_size;
    spec.sampling = g.sampling;
    if let Some(p) = &g.prompt_template_path {
        require_file("generation.prompt_template_path", p)?;
        spec.prompt_template =
            fs::read_to_string(p).map_err(|e| validation(format!("{}: {e}", p.display())))?;
    }
    if spec.state_name.trim().is_empty() {
        return Err(validation("generation.state_name is required"));
    }
    spec.validate()?;
    Ok(spec)
}

fn build_provider(
    cfg: &RunConfig,
    codebook: &Arc<Codebook>,
) -> Result<Box<dyn ProviderClient>, CliError> {
    let p = &cfg.provider;
    match p.kind {
        ProviderKind::Mock => {
            if !p.mock_fixtures.is_empty() {
                let mut payloads = Vec::new();
                for f in &p.mock_fixtures {
                    require_file("provider.mock_fixtures", f)?;
                    payloads.push(
                        fs::read_to_string(f)
                            .map_err(|e| validation(format!("{}: {e}", f.display())))?,
                    );
                }
                return Ok(Box::new(MockProvider::fixture(payloads)));
            }
            let seed = master_seed(cfg)?;
            Ok(Box::new(match p.mock_invalid_every {
                Some(n) => MockProvider::generator_with_invalid(codebook.clone(), seed, n),
                None => MockProvider::generator(codebook.clone(), seed),
            }))
        }
        ProviderKind::OpenaiCompatible | ProviderKind::GeminiCompatible => {
            let endpoint = p
                .endpoint
                .clone()
                .ok_or_else(|| validation("provider.endpoint is required for HTTP providers"))?;
            let model_id = p
                .model_id
                .clone()
                .ok_or_else(|| validation("provider.model_id is required for HTTP providers"))?;
            let api_key = std::env::var(&p.credentials_env).map_err(|_| {
                validation(format!(
                    "environment variable {} is not set; it must hold the provider API key",
                    p.credentials_env
                ))
            })?;
            let http = HttpProviderConfig {
                endpoint,
                model_id,
                api_key,
                timeout: Duration::from_secs(p.timeout_secs),
            };
            Ok(if p.kind == ProviderKind::OpenaiCompatible {
                Box::new(OpenAiCompatible::new(http))
            } else {
                Box::new(GeminiCompatible::new(http))
            })
        }
    }
}

pub fn generate(cfg: &RunConfig, resume: Option<&str>) -> Result<(), CliError> {
    let codebook = load_codebook(cfg)?;
    let spec = generation_spec(cfg, codebook.clone())?;
    let provider = build_provider(cfg, &codebook)?;
    let store = CheckpointStore::new(cfg.checkpoint_root());
    let g = &cfg.generation;
    let options = GenerationOptions {
        run_id: resume.map(String::from).unwrap_or_else(|| cfg.run_id()),
        retry: RetryPolicy {
            max_retries: g.max_retries,
            initial_backoff: Duration::from_millis(g.initial_backoff_ms),
            ..RetryPolicy::default()
        },
        dead_batch_limit: g.dead_batch_limit,
        parallelism: g.parallelism,
    };
    let out = match resume {
        Some(_) => resume_generation(&store, &spec, provider.as_ref(), &options)?,
        None => run_generation(&spec, provider.as_ref(), &store, &options)?,
    };
    let path = cfg.survey_output();
    io::write_survey_file(&out.dataset, &path).map_err(|e| CliError::Internal(e.to_string()))?;
    write_json(
        &cfg.output_dir
            .join(format!("generation_summary_{}.json", cfg.label)),
        &out.summary,
    )?;
    println!(
        "{}",
        serde_json::to_string_pretty(&out.summary)
            .map_err(|e| CliError::Internal(e.to_string()))?
    );
    info!("wrote {} records to {}", out.dataset.len(), path.display());
    Ok(())
}

// ---- synthesize -------------------------------------------------------------

fn synthesis_inputs(
    cfg: &RunConfig,
    codebook: &Arc<Codebook>,
) -> Result<(SurveyDataset, ConstraintSet), CliError> {
    let survey_path = cfg
        .synthesis
        .survey_path
        .clone()
        .unwrap_or_else(|| cfg.survey_output());
    require_file("synthesis.survey_path", &survey_path)?;
    let marginals_path = cfg
        .synthesis
        .marginals_path
        .as_ref()
        .ok_or_else(|| validation("synthesis.marginals_path is required"))?;
    require_file("synthesis.marginals_path", marginals_path)?;
    let survey = io::read_survey_file(&survey_path, codebook.clone())
        .map_err(|e| validation(format!("{}: {e}", survey_path.display())))?;
    let rows = io::read_marginals_file(marginals_path)
        .map_err(|e| validation(format!("{}: {e}", marginals_path.display())))?;
    let constraints = ConstraintSet::from_rows(codebook, &cfg.synthesis.fitting_variables, rows)
        .map_err(|e| validation(format!("{}: {e}", marginals_path.display())))?;
    Ok((survey, constraints))
}

pub fn synthesize(cfg: &RunConfig) -> Result<(), CliError> {
    let seed = master_seed(cfg)?;
    let codebook = load_codebook(cfg)?;
    let (survey, constraints) = synthesis_inputs(cfg, &codebook)?;
    let config = SynthesisConfig {
        ipf: IpfConfig {
            max_sweeps: cfg.synthesis.max_sweeps,
            rel_tolerance: cfg.synthesis.tolerance,
        },
        execution: if cfg.synthesis.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        },
        ..SynthesisConfig::default()
    };
    let pop = synthesize_population(&survey, &constraints, &config, seed).map_err(|e| {
        if !e.completed.is_empty() {
            warn!("{} tracts completed before the failure", e.completed.len());
        }
        validation(e)
    })?;
    let path = cfg.population_output();
    io::write_population_file(&pop, &path).map_err(|e| CliError::Internal(e.to_string()))?;
    let unconverged = pop.diagnostics.iter().filter(|d| !d.converged).count();
    let unreachable: f64 = pop.diagnostics.iter().map(|d| d.unreachable_mass).sum();
    let diagnostics = json!({
        "source_provenance": pop.source_provenance,
        "master_seed": seed,
        "fitting_variables": constraints.fitting_variables(),
        "ipf": config.ipf,
        "individuals": pop.len(),
        "tracts": pop.diagnostics.len(),
        "unconverged_tracts": unconverged,
        "unreachable_mass": unreachable,
        "tract_diagnostics": pop.diagnostics,
    });
    write_json(
        &cfg.output_dir
            .join(format!("population_{}_diagnostics.json", cfg.label)),
        &diagnostics,
    )?;
    println!(
        "{} individuals in {} tracts written to {} ({} unconverged, unreachable mass {})",
        pop.len(),
        pop.diagnostics.len(),
        path.display(),
        unconverged,
        unreachable
    );
    Ok(())
}

// ---- evaluate ---------------------------------------------------------------

struct Candidate {
    label: String,
    survey: Option<SurveyDataset>,
    population: Option<SyntheticPopulation>,
}

fn load_candidates(cfg: &RunConfig, codebook: &Arc<Codebook>) -> Result<Vec<Candidate>, CliError> {
    let mut out = Vec::new();
    for c in &cfg.evaluation.candidates {
        let survey = match &c.survey_path {
            Some(p) => {
                require_file(&format!("candidate {} survey_path", c.label), p)?;
                Some(
                    io::read_survey_file(p, codebook.clone())
                        .map_err(|e| validation(format!("{}: {e}", p.display())))?,
                )
            }
            None => None,
        };
        let population = match &c.population_path {
            Some(p) => {
                require_file(&format!("candidate {} population_path", c.label), p)?;
                Some(
                    io::read_population_file(p, codebook.clone())
                        .map_err(|e| validation(format!("{}: {e}", p.display())))?,
                )
            }
            None => None,
        };
        if survey.is_none() && population.is_none() {
            return Err(validation(format!(
                "candidate {} lists no survey_path or population_path",
                c.label
            )));
        }
        out.push(Candidate {
            label: c.label.clone(),
            survey,
            population,
        });
    }
    Ok(out)
}

fn residual_rows<T: CategoricalSource + ?Sized, C: CategoricalSource + ?Sized>(
    truth: &T,
    label: &str,
    model: &C,
    variables: &[String],
    out: &mut Vec<(String, ResidualReport)>,
) -> Result<(), CliError> {
    for v in variables {
        let t = truth.marginal(v).map_err(validation)?;
        let m = model.marginal(v).map_err(validation)?;
        out.push((
            label.to_string(),
            category_residuals(&t, &m).map_err(validation)?,
        ));
    }
    Ok(())
}

fn residuals_csv(rows: &[(String, ResidualReport)]) -> String {
    let mut s = String::from("candidate,variable,code,truth_share,model_share,residual\n");
    for (label, rep) in rows {
        for c in &rep.categories {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                label, rep.variable, c.code, c.truth_share, c.model_share, c.residual
            );
        }
    }
    s
}

#[derive(Serialize)]
struct SaeEntry {
    benchmark: String,
    candidate: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    summary: Option<SaeSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

pub fn evaluate(cfg: &RunConfig) -> Result<(), CliError> {
    let codebook = load_codebook(cfg)?;
    let ev = &cfg.evaluation;
    let truth_path = ev
        .ground_truth_path
        .as_ref()
        .ok_or_else(|| validation("evaluation.ground_truth_path is required"))?;
    require_file("evaluation.ground_truth_path", truth_path)?;
    for b in &ev.benchmarks {
        require_file(&format!("benchmark {} path", b.name), &b.path)?;
    }
    let truth = io::read_survey_file(truth_path, codebook.clone())
        .map_err(|e| validation(format!("{}: {e}", truth_path.display())))?;
    let candidates = load_candidates(cfg, &codebook)?;
    let variables: Vec<String> = if ev.variables.is_empty() {
        codebook.names().map(String::from).collect()
    } else {
        for v in &ev.variables {
            codebook.require(v).map_err(validation)?;
        }
        ev.variables.clone()
    };
    let dir = &cfg.output_dir;
    let mut report = serde_json::Map::new();

    let pre: Vec<(String, &SurveyDataset)> = candidates
        .iter()
        .filter_map(|c| c.survey.as_ref().map(|s| (c.label.clone(), s)))
        .collect();
    let post: Vec<(String, &SyntheticPopulation)> = candidates
        .iter()
        .filter_map(|c| c.population.as_ref().map(|p| (c.label.clone(), p)))
        .collect();

    let mut tables: Vec<(&str, DivergenceTable)> = Vec::new();
    if !pre.is_empty() {
        let t =
            divergence_table(&truth, &pre, &variables, Execution::Parallel).map_err(validation)?;
        tables.push(("pre_synthesis", t));
        let mut rows = Vec::new();
        for (label, s) in &pre {
            residual_rows(&truth, label, *s, &variables, &mut rows)?;
        }
        write_output(
            &dir.join("residuals_pre_synthesis.csv"),
            &residuals_csv(&rows),
        )?;
    }
    if !post.is_empty() {
        let t =
            divergence_table(&truth, &post, &variables, Execution::Parallel).map_err(validation)?;
        tables.push(("post_synthesis", t));
        let mut rows = Vec::new();
        for (label, p) in &post {
            residual_rows(&truth, label, *p, &variables, &mut rows)?;
        }
        write_output(
            &dir.join("residuals_post_synthesis.csv"),
            &residuals_csv(&rows),
        )?;
    }
    for (name, t) in &tables {
        write_output(&dir.join(format!("table_{name}.csv")), &t.to_csv())?;
        write_json(&dir.join(format!("table_{name}.json")), t)?;
        report.insert(
            format!("table_{name}"),
            serde_json::to_value(t).expect("table serializes"),
        );
    }
    let both: Vec<String> = candidates
        .iter()
        .filter(|c| c.survey.is_some() && c.population.is_some())
        .map(|c| c.label.clone())
        .collect();
    if !both.is_empty() && tables.len() == 2 {
        let before = tables[0].1.select_columns(&both).map_err(validation)?;
        let after = tables[1].1.select_columns(&both).map_err(validation)?;
        let delta = divergence_delta(&before, &after).map_err(validation)?;
        write_output(&dir.join("table_delta.csv"), &delta.to_csv())?;
        write_json(&dir.join("table_delta.json"), &delta)?;
        report.insert(
            "table_delta".into(),
            serde_json::to_value(&delta).expect("delta serializes"),
        );
    }

    let mut sae_entries = Vec::new();
    for b in &ev.benchmarks {
        let source = b.source.clone().unwrap_or_else(|| b.name.clone());
        let bench = io::read_benchmark_file(&b.path, source);
        for (label, pop) in &post {
            let result = bench.as_ref().map_err(|e| e.to_string()).and_then(|bench| {
                let pred = OutcomePredicate::new(
                    &codebook,
                    &b.variable,
                    b.positive_codes.iter().copied(),
                    &b.outcome_label,
                )
                .map_err(|e| e.to_string())?;
                let est = tract_estimate(pop, &pred).map_err(|e| e.to_string())?;
                sae_report(&est, bench).map_err(|e| e.to_string())
            });
            let entry = match result {
                Ok((map, summary)) => {
                    write_output(
                        &dir.join(format!("sae_{}_{}.csv", b.name, label)),
                        &map.to_csv(),
                    )?;
                    SaeEntry {
                        benchmark: b.name.clone(),
                        candidate: label.clone(),
                        summary: Some(summary),
                        error: None,
                    }
                }
                Err(error) => {
                    warn!("SAE {} / {label}: {error}", b.name);
                    SaeEntry {
                        benchmark: b.name.clone(),
                        candidate: label.clone(),
                        summary: None,
                        error: Some(error),
                    }
                }
            };
            sae_entries.push(entry);
        }
    }
    if !ev.benchmarks.is_empty() {
        write_json(&dir.join("sae_summary.json"), &sae_entries)?;
        report.insert(
            "sae".into(),
            serde_json::to_value(&sae_entries).expect("sae serializes"),
        );
    }
    write_json(&dir.join("evaluation_report.json"), &report)?;

    for (name, t) in &tables {
        println!("{name}\n{}", t.to_csv());
    }
    let failed: Vec<String> = sae_entries
        .iter()
        .filter_map(|e| {
            e.error
                .as_ref()
                .map(|err| format!("{} / {}: {err}", e.benchmark, e.candidate))
        })
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Validation(format!(
            "SAE evaluation failed: {}",
            failed.join("; ")
        )))
    }
}

// ---- validate ---------------------------------------------------------------

pub fn validate(cfg: &RunConfig) -> Result<(), CliError> {
    let mut problems: Vec<String> = Vec::new();
    let mut report = |what: String, result: Result<(), String>| match result {
        Ok(()) => println!("ok      {what}"),
        Err(e) => {
            println!("error   {what}: {e}");
            problems.push(what);
        }
    };
    let codebook = match load_codebook(cfg) {
        Ok(cb) => {
            report(format!("codebook ({} variables)", cb.len()), Ok(()));
            cb
        }
        Err(e) => {
            report("codebook".into(), Err(e.to_string()));
            return Err(validation("codebook is invalid"));
        }
    };
    let survey_check = |p: &PathBuf| -> Result<(), String> {
        io::read_survey_file(p, codebook.clone())
            .map(|_| ())
            .map_err(|e| e.to_string())
    };
    if !cfg.generation.state_name.is_empty() {
        report(
            "generation spec".into(),
            generation_spec(cfg, codebook.clone())
                .map(|_| ())
                .map_err(|e| e.to_string()),
        );
    }
    for f in &cfg.provider.mock_fixtures {
        report(
            format!("fixture {}", f.display()),
            require_file("provider.mock_fixtures", f).map_err(|e| e.to_string()),
        );
    }
    if let Some(p) = &cfg.synthesis.survey_path {
        report(format!("survey {}", p.display()), survey_check(p));
    }
    if let Some(p) = &cfg.synthesis.marginals_path {
        let r = io::read_marginals_file(p)
            .map_err(|e| e.to_string())
            .and_then(|rows| {
                ConstraintSet::from_rows(&codebook, &cfg.synthesis.fitting_variables, rows)
                    .map(|_| ())
                    .map_err(|e| e.to_string())
            });
        report(format!("marginals {}", p.display()), r);
    }
    if let Some(p) = &cfg.evaluation.ground_truth_path {
        report(format!("ground truth {}", p.display()), survey_check(p));
    }
    for c in &cfg.evaluation.candidates {
        if let Some(p) = &c.survey_path {
            report(
                format!("candidate {} survey {}", c.label, p.display()),
                survey_check(p),
            );
        }
        if let Some(p) = &c.population_path {
            let r = io::read_population_file(p, codebook.clone())
                .map(|_| ())
                .map_err(|e| e.to_string());
            report(
                format!("candidate {} population {}", c.label, p.display()),
                r,
            );
        }
    }
    for b in &cfg.evaluation.benchmarks {
        let r = io::read_benchmark_file(&b.path, &b.name)
            .map_err(|e| e.to_string())
            .and_then(|_| {
                OutcomePredicate::new(
                    &codebook,
                    &b.variable,
                    b.positive_codes.iter().copied(),
                    &b.outcome_label,
                )
                .map(|_| ())
                .map_err(|e| e.to_string())
            });
        report(format!("benchmark {} {}", b.name, b.path.display()), r);
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(validation(format!("{} problem(s) found", problems.len())))
    }
}
