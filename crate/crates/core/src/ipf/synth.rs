use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::fit::{initial_weights, ipf_fit_with_design, IpfConfig, IpfDesign};
use super::trs::{integerize_trs, integerize_trs_to_total, round_half_even};
use super::{harmonize_marginals, ConstraintSet, IpfError, TractMarginals};
use crate::codebook::{Code, Codebook, Row, SurveyDataset};
use crate::exec::{map_indexed, map_slice, Execution};
use crate::metrics::{CategoricalDistribution, CategoricalSource, MetricsError};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SyntheticIndividual {
    pub person_id: u64,
    pub geoid: Arc<str>,
    /// Attribute codes in codebook order, shared with the source record.
    pub values: Row,
}

impl SyntheticIndividual {
    pub fn value(&self, codebook: &Codebook, variable: &str) -> Option<Code> {
        codebook.index_of(variable).map(|i| self.values[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TractDiagnostics {
    pub geoid: String,
    pub seed: u64,
    pub population_total: f64,
    pub individuals: u64,
    pub iterations_used: usize,
    pub converged: bool,
    pub max_rel_error: f64,
    pub tae: f64,
    pub unreachable_mass: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisConfig {
    pub ipf: IpfConfig,
    pub execution: Execution,
    /// Id given to the first individual of the first tract.
    pub first_person_id: u64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            ipf: IpfConfig::default(),
            execution: Execution::default(),
            first_person_id: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPopulation {
    codebook: Arc<Codebook>,
    pub individuals: Vec<SyntheticIndividual>,
    pub source_provenance: String,
    pub master_seed: u64,
    /// Per-tract diagnostics in geoid order; empty for populations read
    /// back from a file.
    pub diagnostics: Vec<TractDiagnostics>,
}

impl SyntheticPopulation {
    pub fn new(
        codebook: Arc<Codebook>,
        individuals: Vec<SyntheticIndividual>,
        source_provenance: impl Into<String>,
        master_seed: u64,
    ) -> Self {
        SyntheticPopulation {
            codebook,
            individuals,
            source_provenance: source_provenance.into(),
            master_seed,
            diagnostics: Vec::new(),
        }
    }

    pub fn codebook(&self) -> &Arc<Codebook> {
        &self.codebook
    }

    pub fn len(&self) -> usize {
        self.individuals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.individuals.is_empty()
    }

    /// Every tract known to the population in geoid order, including tracts
    /// that received no individuals when diagnostics are available.
    pub fn tract_geoids(&self) -> Vec<String> {
        let mut ids: Vec<String> = if self.diagnostics.is_empty() {
            self.individuals
                .iter()
                .map(|i| i.geoid.to_string())
                .collect()
        } else {
            self.diagnostics.iter().map(|d| d.geoid.clone()).collect()
        };
        ids.sort();
        ids.dedup();
        ids
    }
}

impl CategoricalSource for SyntheticPopulation {
    fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    fn marginal(&self, variable: &str) -> Result<CategoricalDistribution, MetricsError> {
        let (col, spec) = self.codebook.require(variable)?;
        let mut counts = vec![0.0; spec.codes.len()];
        for ind in &self.individuals {
            let k = spec.code_index(ind.values[col]).ok_or_else(|| {
                MetricsError::InvalidDistribution {
                    variable: variable.to_string(),
                    reason: format!("person {} has code {}", ind.person_id, ind.values[col]),
                }
            })?;
            counts[k] += 1.0;
        }
        CategoricalDistribution::from_counts(variable, spec.codes.clone(), &counts)
    }
}

/// Seed for a tract's integerization stream, independent of tract order.
pub fn tract_seed(master_seed: u64, geoid: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master_seed.to_le_bytes());
    h.update(geoid.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Emits `counts[i]` verbatim copies of record `i`, numbered from `id_base`.
pub fn expand(
    survey: &SurveyDataset,
    counts: &[u64],
    geoid: &str,
    id_base: u64,
) -> Result<Vec<SyntheticIndividual>, IpfError> {
    if counts.len() != survey.len() {
        return Err(IpfError::LengthMismatch {
            counts: counts.len(),
            records: survey.len(),
        });
    }
    let geoid: Arc<str> = Arc::from(geoid);
    let total: u64 = counts.iter().sum();
    let mut out = Vec::with_capacity(total as usize);
    let mut next = id_base;
    for (row, &n) in survey.rows().iter().zip(counts) {
        for _ in 0..n {
            out.push(SyntheticIndividual {
                person_id: next,
                geoid: geoid.clone(),
                values: row.clone(),
            });
            next += 1;
        }
    }
    Ok(out)
}

#[derive(Debug, Error)]
#[error("synthesis failed in tract {geoid}: {source}")]
pub struct SynthesisError {
    pub geoid: String,
    #[source]
    pub source: IpfError,
    /// Diagnostics of tracts that finished before the failing one.
    pub completed: Vec<TractDiagnostics>,
}

struct TractOutcome {
    counts: Vec<u64>,
    diagnostics: TractDiagnostics,
}

fn synthesize_tract(
    design: &IpfDesign,
    initial: &[f64],
    tract: &TractMarginals,
    config: &IpfConfig,
    master_seed: u64,
) -> Result<TractOutcome, IpfError> {
    let fit = ipf_fit_with_design(design, initial, tract, config)?;
    let seed = tract_seed(master_seed, &tract.geoid);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = round_half_even(tract.population_total) as u64;
    // Aim for the rounded constraint total when every category was
    // reachable; otherwise fall back to whatever mass the weights carry.
    let counts = if fit.unreachable_mass == 0.0 {
        match integerize_trs_to_total(&fit.weights, target, &mut rng) {
            Ok(c) => c,
            Err(IpfError::TotalOutOfReach { .. }) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                integerize_trs(&fit.weights, &mut rng)?
            }
            Err(e) => return Err(e),
        }
    } else {
        integerize_trs(&fit.weights, &mut rng)?
    };
    let individuals = counts.iter().sum();
    Ok(TractOutcome {
        counts,
        diagnostics: TractDiagnostics {
            geoid: tract.geoid.clone(),
            seed,
            population_total: tract.population_total,
            individuals,
            iterations_used: fit.iterations_used,
            converged: fit.converged,
            max_rel_error: fit.max_rel_error,
            tae: fit.tae,
            unreachable_mass: fit.unreachable_mass,
        },
    })
}

/// Fits, integerizes and expands every tract in ascending geoid order.
///
/// Constraints are harmonized first when they are not already. Tracts are
/// processed independently (in parallel under [`Execution::Parallel`]); the
/// result is identical for either execution mode.
pub fn synthesize_population(
    survey: &SurveyDataset,
    constraints: &ConstraintSet,
    config: &SynthesisConfig,
    master_seed: u64,
) -> Result<SyntheticPopulation, SynthesisError> {
    let harmonized;
    let constraints = if constraints.is_harmonized() {
        constraints
    } else {
        harmonized = harmonize_marginals(constraints).map_err(|e| SynthesisError {
            geoid: match &e {
                IpfError::DegenerateTract { geoid, .. } => geoid.clone(),
                _ => String::new(),
            },
            source: e,
            completed: Vec::new(),
        })?;
        &harmonized
    };
    let whole_run = |source| SynthesisError {
        geoid: String::new(),
        source,
        completed: Vec::new(),
    };
    let design = IpfDesign::new(survey, constraints.fitting_variables()).map_err(whole_run)?;
    let initial = initial_weights(survey).map_err(whole_run)?;

    let tracts: Vec<&TractMarginals> = constraints.tracts().collect();
    let outcomes = map_slice(config.execution, &tracts, |t| {
        synthesize_tract(&design, &initial, t, &config.ipf, master_seed)
    });

    let mut diagnostics = Vec::with_capacity(tracts.len());
    let mut per_tract_counts = Vec::with_capacity(tracts.len());
    for (tract, outcome) in tracts.iter().zip(outcomes) {
        match outcome {
            Ok(o) => {
                diagnostics.push(o.diagnostics);
                per_tract_counts.push(o.counts);
            }
            Err(source) => {
                return Err(SynthesisError {
                    geoid: tract.geoid.clone(),
                    source,
                    completed: diagnostics,
                })
            }
        }
    }

    let mut bases = Vec::with_capacity(tracts.len());
    let mut next = config.first_person_id;
    for d in &diagnostics {
        bases.push(next);
        next += d.individuals;
    }
    let chunks = map_indexed(config.execution, tracts.len(), |i| {
        expand(survey, &per_tract_counts[i], &tracts[i].geoid, bases[i])
    });
    let mut individuals = Vec::with_capacity((next - config.first_person_id) as usize);
    for (tract, chunk) in tracts.iter().zip(chunks) {
        let chunk = chunk.map_err(|source| SynthesisError {
            geoid: tract.geoid.clone(),
            source,
            completed: diagnostics.clone(),
        })?;
        individuals.extend(chunk);
    }

    Ok(SyntheticPopulation {
        codebook: survey.codebook().clone(),
        individuals,
        source_provenance: survey.provenance().to_string(),
        master_seed,
        diagnostics,
    })
}
