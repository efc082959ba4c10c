//! Tract-level small-area estimates from a synthetic population and their
//! comparison against external benchmark tables.
//!
//! Residuals are `benchmark - estimate`: negative means the population
//! overestimates the outcome. Correlations pair tracts by geoid without
//! population weighting.

use std::collections::{BTreeMap, BTreeSet};

use log::info;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codebook::{Code, Codebook};
use crate::ipf::SyntheticPopulation;
use crate::metrics::{pearson_r, MetricsError};

#[derive(Debug, Error)]
pub enum SaeError {
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("predicate on `{0}` has no positive codes")]
    EmptyPredicate(String),
    #[error("code {code} is not valid for `{variable}`")]
    UnknownCode { variable: String, code: Code },
    #[error("population is empty")]
    EmptyPopulation,
    #[error("no geoid in common between {estimates} estimated and {benchmark} benchmark tracts")]
    EmptyIntersection { estimates: usize, benchmark: usize },
    #[error("benchmark value {value} for {geoid} is not a proportion")]
    BadBenchmarkValue { geoid: String, value: f64 },
    #[error("benchmark lists geoid {0} twice")]
    DuplicateGeoid(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Binary outcome: the variable takes one of `positive_codes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomePredicate {
    pub variable: String,
    pub positive_codes: BTreeSet<Code>,
    pub label: String,
}

impl OutcomePredicate {
    pub fn new(
        codebook: &Codebook,
        variable: &str,
        positive_codes: impl IntoIterator<Item = Code>,
        label: impl Into<String>,
    ) -> Result<Self, SaeError> {
        let p = OutcomePredicate {
            variable: variable.to_string(),
            positive_codes: positive_codes.into_iter().collect(),
            label: label.into(),
        };
        p.validate(codebook)?;
        Ok(p)
    }

    pub fn validate(&self, codebook: &Codebook) -> Result<(), SaeError> {
        let var = codebook
            .variable(&self.variable)
            .ok_or_else(|| SaeError::UnknownVariable(self.variable.clone()))?;
        if self.positive_codes.is_empty() {
            return Err(SaeError::EmptyPredicate(self.variable.clone()));
        }
        if let Some(&code) = self.positive_codes.iter().find(|c| !var.contains(**c)) {
            return Err(SaeError::UnknownCode {
                variable: self.variable.clone(),
                code,
            });
        }
        Ok(())
    }

    pub fn matches(&self, code: Code) -> bool {
        self.positive_codes.contains(&code)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TractEstimate {
    pub positives: u64,
    pub population: u64,
    pub proportion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TractEstimates {
    pub outcome: String,
    pub tracts: BTreeMap<String, TractEstimate>,
    /// Tracts with no individuals.
    pub excluded: Vec<String>,
}

impl TractEstimates {
    pub fn proportion(&self, geoid: &str) -> Option<f64> {
        self.tracts.get(geoid).map(|t| t.proportion)
    }

    pub fn positive_total(&self) -> u64 {
        self.tracts.values().map(|t| t.positives).sum()
    }

    pub fn population_total(&self) -> u64 {
        self.tracts.values().map(|t| t.population).sum()
    }
}

/// Proportion of individuals matching `predicate` in every tract. Tracts
/// listed in the population diagnostics but holding nobody are excluded.
pub fn tract_estimate(
    population: &SyntheticPopulation,
    predicate: &OutcomePredicate,
) -> Result<TractEstimates, SaeError> {
    let known: Vec<String> = population
        .diagnostics
        .iter()
        .map(|d| d.geoid.clone())
        .collect();
    tract_estimate_over(population, predicate, &known)
}

/// As [`tract_estimate`], with the full tract list given explicitly.
pub fn tract_estimate_over(
    population: &SyntheticPopulation,
    predicate: &OutcomePredicate,
    expected_geoids: &[String],
) -> Result<TractEstimates, SaeError> {
    let codebook = population.codebook();
    predicate.validate(codebook)?;
    if population.is_empty() {
        return Err(SaeError::EmptyPopulation);
    }
    let col = codebook.index_of(&predicate.variable).expect("validated");
    let mut counts: BTreeMap<&str, (u64, u64)> = BTreeMap::new();
    for ind in &population.individuals {
        let e = counts.entry(&ind.geoid).or_default();
        e.1 += 1;
        if predicate.matches(ind.values[col]) {
            e.0 += 1;
        }
    }
    let tracts = counts
        .into_iter()
        .map(|(g, (positives, population))| {
            (
                g.to_string(),
                TractEstimate {
                    positives,
                    population,
                    proportion: positives as f64 / population as f64,
                },
            )
        })
        .collect::<BTreeMap<_, _>>();
    let excluded: BTreeSet<String> = expected_geoids
        .iter()
        .filter(|g| !tracts.contains_key(*g))
        .cloned()
        .collect();
    Ok(TractEstimates {
        outcome: predicate.label.clone(),
        tracts,
        excluded: excluded.into_iter().collect(),
    })
}

/// External tract-level proportions keyed by geoid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkTable {
    pub source: String,
    pub values: BTreeMap<String, f64>,
    /// Input was on a 0-100 scale and was divided by 100.
    pub rescaled_from_percent: bool,
}

impl BenchmarkTable {
    pub fn new(source: impl Into<String>, values: Vec<(String, f64)>) -> Result<Self, SaeError> {
        let source = source.into();
        let rescale = values.iter().any(|(_, v)| *v > 1.0);
        if rescale {
            info!("benchmark {source}: values above 1 found, treating as percentages");
        }
        let mut map = BTreeMap::new();
        for (geoid, v) in values {
            let p = if rescale { v / 100.0 } else { v };
            if !(0.0..=1.0).contains(&p) {
                return Err(SaeError::BadBenchmarkValue { geoid, value: v });
            }
            if map.insert(geoid.clone(), p).is_some() {
                return Err(SaeError::DuplicateGeoid(geoid));
            }
        }
        Ok(BenchmarkTable {
            source,
            values: map,
            rescaled_from_percent: rescale,
        })
    }

    /// Benchmark equal to the given estimates.
    pub fn from_estimates(source: impl Into<String>, estimates: &TractEstimates) -> Self {
        BenchmarkTable {
            source: source.into(),
            values: estimates
                .tracts
                .iter()
                .map(|(g, t)| (g.clone(), t.proportion))
                .collect(),
            rescaled_from_percent: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualRow {
    pub geoid: String,
    pub estimate: f64,
    pub benchmark: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualMap {
    /// Geoid order.
    pub rows: Vec<ResidualRow>,
    pub estimates_only: Vec<String>,
    pub benchmark_only: Vec<String>,
}

impl ResidualMap {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("geoid,estimate,benchmark,residual\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{}\n",
                r.geoid, r.estimate, r.benchmark, r.residual
            ));
        }
        s
    }
}

fn paired(
    estimates: &TractEstimates,
    benchmark: &BenchmarkTable,
) -> Result<Vec<(String, f64, f64)>, SaeError> {
    let pairs: Vec<_> = estimates
        .tracts
        .iter()
        .filter_map(|(g, t)| {
            benchmark
                .values
                .get(g)
                .map(|&b| (g.clone(), t.proportion, b))
        })
        .collect();
    if pairs.is_empty() {
        return Err(SaeError::EmptyIntersection {
            estimates: estimates.tracts.len(),
            benchmark: benchmark.values.len(),
        });
    }
    Ok(pairs)
}

pub fn residual_map(
    estimates: &TractEstimates,
    benchmark: &BenchmarkTable,
) -> Result<ResidualMap, SaeError> {
    let rows = paired(estimates, benchmark)?
        .into_iter()
        .map(|(geoid, estimate, bench)| ResidualRow {
            geoid,
            estimate,
            benchmark: bench,
            residual: bench - estimate,
        })
        .collect();
    Ok(ResidualMap {
        rows,
        estimates_only: estimates
            .tracts
            .keys()
            .filter(|g| !benchmark.values.contains_key(*g))
            .cloned()
            .collect(),
        benchmark_only: benchmark
            .values
            .keys()
            .filter(|g| !estimates.tracts.contains_key(*g))
            .cloned()
            .collect(),
    })
}

/// Pearson r between estimate and benchmark over shared tracts.
pub fn spatial_correlation(
    estimates: &TractEstimates,
    benchmark: &BenchmarkTable,
) -> Result<f64, SaeError> {
    let pairs = paired(estimates, benchmark)?;
    let x: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let y: Vec<f64> = pairs.iter().map(|p| p.2).collect();
    Ok(pearson_r(&x, &y)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeSummary {
    pub outcome: String,
    pub benchmark_source: String,
    pub weighting: String,
    /// `None` when the correlation is undefined (fewer than two shared
    /// tracts or a constant side); see `correlation_error`.
    pub r: Option<f64>,
    pub correlation_error: Option<String>,
    pub mean_residual: f64,
    pub mean_absolute_residual: f64,
    pub n_tracts: usize,
    pub exclusions: Vec<String>,
    pub estimates_only: Vec<String>,
    pub benchmark_only: Vec<String>,
}

pub fn sae_report(
    estimates: &TractEstimates,
    benchmark: &BenchmarkTable,
) -> Result<(ResidualMap, SaeSummary), SaeError> {
    let map = residual_map(estimates, benchmark)?;
    let n = map.rows.len() as f64;
    let (r, correlation_error) = match spatial_correlation(estimates, benchmark) {
        Ok(r) => (Some(r), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let summary = SaeSummary {
        outcome: estimates.outcome.clone(),
        benchmark_source: benchmark.source.clone(),
        weighting: "unweighted tract pairs".into(),
        r,
        correlation_error,
        mean_residual: map.rows.iter().map(|r| r.residual).sum::<f64>() / n,
        mean_absolute_residual: map.rows.iter().map(|r| r.residual.abs()).sum::<f64>() / n,
        n_tracts: map.rows.len(),
        exclusions: estimates.excluded.clone(),
        estimates_only: map.estimates_only.clone(),
        benchmark_only: map.benchmark_only.clone(),
    };
    Ok((map, summary))
}
