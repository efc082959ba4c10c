use std::collections::{BTreeMap, HashMap};

use log::warn;
use serde::Serialize;

use super::IpfError;
use crate::codebook::{Code, Codebook};

pub const DEFAULT_FITTING_VARIABLES: [&str; 5] =
    ["age", "race_ethnicity", "sex", "income", "education"];

/// Target counts for one fitting variable, in codebook code order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Margin {
    pub variable: String,
    pub codes: Vec<Code>,
    pub counts: Vec<f64>,
}

impl Margin {
    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }

    pub fn count(&self, code: Code) -> Option<f64> {
        self.codes
            .iter()
            .position(|&c| c == code)
            .map(|i| self.counts[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TractMarginals {
    pub geoid: String,
    /// One margin per fitting variable, in fitting order.
    pub margins: Vec<Margin>,
    pub population_total: f64,
    /// Fitting variables whose counts are all zero in this tract. They carry
    /// no information and are skipped by the fit.
    pub zero_total_variables: Vec<String>,
}

impl TractMarginals {
    pub fn margin(&self, variable: &str) -> Option<&Margin> {
        self.margins.iter().find(|m| m.variable == variable)
    }
}

/// One line of a `geoid,variable,code,count` marginals file.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalRow {
    pub geoid: String,
    pub variable: String,
    pub code: Code,
    pub count: f64,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstraintSet {
    fitting_variables: Vec<String>,
    tracts: BTreeMap<String, TractMarginals>,
    harmonized: bool,
}

impl ConstraintSet {
    /// Assembles and validates per-tract marginals. Every tract must give a
    /// count (zero allowed) for every (fitting variable, code) pair. Rows for
    /// codebook variables outside the fitting set are ignored.
    pub fn from_rows(
        codebook: &Codebook,
        fitting_variables: &[String],
        rows: impl IntoIterator<Item = MarginalRow>,
    ) -> Result<Self, IpfError> {
        if fitting_variables.is_empty() {
            return Err(IpfError::NoFittingVariables);
        }
        let mut specs = Vec::with_capacity(fitting_variables.len());
        for v in fitting_variables {
            let spec = codebook
                .variable(v)
                .ok_or_else(|| IpfError::UnknownFittingVariable(v.clone()))?;
            specs.push(spec);
        }
        let fit_index: HashMap<&str, usize> = fitting_variables
            .iter()
            .enumerate()
            .map(|(i, v)| (v.as_str(), i))
            .collect();

        let mut cells: BTreeMap<String, Vec<Vec<Option<f64>>>> = BTreeMap::new();
        let mut ignored: BTreeMap<String, usize> = BTreeMap::new();
        for row in rows {
            let Some(spec) = codebook.variable(&row.variable) else {
                return Err(IpfError::UnknownVariable {
                    variable: row.variable,
                    line: row.line,
                });
            };
            let Some(code_idx) = spec.code_index(row.code) else {
                return Err(IpfError::UnknownCode {
                    variable: row.variable,
                    code: row.code,
                    line: row.line,
                });
            };
            if !row.count.is_finite() || row.count < 0.0 {
                return Err(IpfError::BadCount {
                    count: row.count,
                    line: row.line,
                });
            }
            let Some(&var_idx) = fit_index.get(row.variable.as_str()) else {
                *ignored.entry(row.variable).or_default() += 1;
                continue;
            };
            let tract = cells
                .entry(row.geoid.clone())
                .or_insert_with(|| specs.iter().map(|s| vec![None; s.codes.len()]).collect());
            let slot = &mut tract[var_idx][code_idx];
            if slot.is_some() {
                return Err(IpfError::DuplicateCount {
                    geoid: row.geoid,
                    variable: row.variable,
                    code: row.code,
                    line: row.line,
                });
            }
            *slot = Some(row.count);
        }
        for (variable, n) in ignored {
            warn!("ignoring {n} marginal rows for non-fitting variable `{variable}`");
        }

        let mut tracts = BTreeMap::new();
        for (geoid, per_var) in cells {
            let mut margins = Vec::with_capacity(specs.len());
            for (spec, counts) in specs.iter().zip(per_var) {
                let counts = counts
                    .into_iter()
                    .zip(&spec.codes)
                    .map(|(c, &code)| {
                        c.ok_or_else(|| IpfError::MissingCount {
                            geoid: geoid.clone(),
                            variable: spec.name.clone(),
                            code,
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                margins.push(Margin {
                    variable: spec.name.clone(),
                    codes: spec.codes.clone(),
                    counts,
                });
            }
            let population_total = margins[0].total();
            tracts.insert(
                geoid.clone(),
                TractMarginals {
                    geoid,
                    margins,
                    population_total,
                    zero_total_variables: Vec::new(),
                },
            );
        }
        Ok(ConstraintSet {
            fitting_variables: fitting_variables.to_vec(),
            tracts,
            harmonized: false,
        })
    }

    /// Builds a set from already-assembled tracts (margins in fitting order).
    pub fn from_tracts(
        fitting_variables: Vec<String>,
        tracts: impl IntoIterator<Item = TractMarginals>,
    ) -> Result<Self, IpfError> {
        if fitting_variables.is_empty() {
            return Err(IpfError::NoFittingVariables);
        }
        let mut map = BTreeMap::new();
        for t in tracts {
            let names: Vec<&str> = t.margins.iter().map(|m| m.variable.as_str()).collect();
            if names
                != fitting_variables
                    .iter()
                    .map(String::as_str)
                    .collect::<Vec<_>>()
                || t.margins.iter().any(|m| m.codes.len() != m.counts.len())
            {
                return Err(IpfError::DesignMismatch { geoid: t.geoid });
            }
            map.insert(t.geoid.clone(), t);
        }
        Ok(ConstraintSet {
            fitting_variables,
            tracts: map,
            harmonized: false,
        })
    }

    pub fn fitting_variables(&self) -> &[String] {
        &self.fitting_variables
    }

    /// Tracts in ascending geoid order.
    pub fn tracts(&self) -> impl Iterator<Item = &TractMarginals> {
        self.tracts.values()
    }

    pub fn tract(&self, geoid: &str) -> Option<&TractMarginals> {
        self.tracts.get(geoid)
    }

    pub fn len(&self) -> usize {
        self.tracts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracts.is_empty()
    }

    pub fn is_harmonized(&self) -> bool {
        self.harmonized
    }
}

/// Makes every fitting variable in a tract sum to the first variable's
/// total by proportional rescaling.
pub fn harmonize_marginals(raw: &ConstraintSet) -> Result<ConstraintSet, IpfError> {
    let mut tracts = BTreeMap::new();
    for (geoid, tract) in &raw.tracts {
        let first = &tract.margins[0];
        let population_total = first.total();
        if population_total.is_nan() || population_total <= 0.0 {
            return Err(IpfError::DegenerateTract {
                geoid: geoid.clone(),
                variable: first.variable.clone(),
            });
        }
        let mut zero_total_variables = Vec::new();
        let margins = tract
            .margins
            .iter()
            .map(|m| {
                let total = m.total();
                let mut m = m.clone();
                if total > 0.0 {
                    if total != population_total {
                        let scale = population_total / total;
                        m.counts.iter_mut().for_each(|c| *c *= scale);
                    }
                } else {
                    warn!("tract {geoid}: `{}` has zero total", m.variable);
                    zero_total_variables.push(m.variable.clone());
                }
                m
            })
            .collect();
        tracts.insert(
            geoid.clone(),
            TractMarginals {
                geoid: geoid.clone(),
                margins,
                population_total,
                zero_total_variables,
            },
        );
    }
    Ok(ConstraintSet {
        fitting_variables: raw.fitting_variables.clone(),
        tracts,
        harmonized: true,
    })
}
