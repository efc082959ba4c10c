use log::warn;
use serde::{Deserialize, Serialize};

use super::{IpfError, TractMarginals};
use crate::codebook::{Code, SurveyDataset};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IpfConfig {
    pub max_sweeps: usize,
    /// Stop once every reachable category is within this relative error.
    pub rel_tolerance: f64,
}

impl Default for IpfConfig {
    fn default() -> Self {
        IpfConfig {
            max_sweeps: 100,
            rel_tolerance: 1e-6,
        }
    }
}

/// Per-record category indices for each fitting variable, computed once per
/// survey and shared by every tract fit.
#[derive(Debug, Clone)]
pub struct IpfDesign {
    variables: Vec<String>,
    codes: Vec<Vec<Code>>,
    categories: Vec<Vec<u32>>,
    n_records: usize,
}

impl IpfDesign {
    pub fn new(survey: &SurveyDataset, fitting_variables: &[String]) -> Result<Self, IpfError> {
        if survey.is_empty() {
            return Err(IpfError::EmptySurvey);
        }
        if fitting_variables.is_empty() {
            return Err(IpfError::NoFittingVariables);
        }
        let cb = survey.codebook();
        let mut codes = Vec::with_capacity(fitting_variables.len());
        let mut categories = Vec::with_capacity(fitting_variables.len());
        for v in fitting_variables {
            let (col, spec) = cb
                .require(v)
                .map_err(|_| IpfError::UnknownFittingVariable(v.clone()))?;
            let cats = survey
                .rows()
                .iter()
                .map(|r| spec.code_index(r[col]).expect("validated row") as u32)
                .collect();
            codes.push(spec.codes.clone());
            categories.push(cats);
        }
        Ok(IpfDesign {
            variables: fitting_variables.to_vec(),
            codes,
            categories,
            n_records: survey.len(),
        })
    }

    pub fn variables(&self) -> &[String] {
        &self.variables
    }

    pub fn n_records(&self) -> usize {
        self.n_records
    }

    pub fn record_categories(&self, var: usize) -> &[u32] {
        &self.categories[var]
    }

    pub fn weighted_counts(&self, var: usize, weights: &[f64]) -> Vec<f64> {
        tally(&self.categories[var], weights, self.codes[var].len())
    }

    fn check(&self, marginals: &TractMarginals) -> Result<(), IpfError> {
        let ok = marginals.margins.len() == self.variables.len()
            && marginals
                .margins
                .iter()
                .zip(self.variables.iter().zip(&self.codes))
                .all(|(m, (v, c))| &m.variable == v && &m.codes == c && m.counts.len() == c.len());
        if ok {
            Ok(())
        } else {
            Err(IpfError::DesignMismatch {
                geoid: marginals.geoid.clone(),
            })
        }
    }
}

fn tally(categories: &[u32], weights: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for (&k, &w) in categories.iter().zip(weights) {
        out[k as usize] += w;
    }
    out
}

/// Scales weights so each category of one variable hits its target.
/// Categories with no current weight are left alone and returned.
pub fn rake_variable(weights: &mut [f64], categories: &[u32], targets: &[f64]) -> Vec<usize> {
    let current = tally(categories, weights, targets.len());
    let mut unreachable = Vec::new();
    let factors: Vec<f64> = current
        .iter()
        .zip(targets)
        .enumerate()
        .map(|(k, (&cur, &target))| {
            if cur > 0.0 {
                target / cur
            } else {
                if target > 0.0 {
                    unreachable.push(k);
                }
                1.0
            }
        })
        .collect();
    for (w, &k) in weights.iter_mut().zip(categories) {
        *w *= factors[k as usize];
    }
    unreachable
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnreachableCategory {
    pub variable: String,
    pub code: Code,
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FittedWeights {
    pub geoid: String,
    pub weights: Vec<f64>,
    pub iterations_used: usize,
    pub converged: bool,
    /// Largest relative marginal error over reachable categories.
    pub max_rel_error: f64,
    /// Σ |fitted − target| over every fitting category.
    pub tae: f64,
    pub unreachable_mass: f64,
    pub unreachable: Vec<UnreachableCategory>,
}

/// Starting weights: design weights when the survey carries them, else 1.0.
pub fn initial_weights(survey: &SurveyDataset) -> Result<Vec<f64>, IpfError> {
    if survey.is_empty() {
        return Err(IpfError::EmptySurvey);
    }
    Ok(match survey.weights() {
        Some(w) => w.to_vec(),
        None => vec![1.0; survey.len()],
    })
}

/// Fits one tract, building the design from the survey.
pub fn ipf_fit(
    survey: &SurveyDataset,
    marginals: &TractMarginals,
    config: &IpfConfig,
) -> Result<FittedWeights, IpfError> {
    let vars: Vec<String> = marginals
        .margins
        .iter()
        .map(|m| m.variable.clone())
        .collect();
    let design = IpfDesign::new(survey, &vars)?;
    ipf_fit_with_design(&design, &initial_weights(survey)?, marginals, config)
}

pub fn ipf_fit_with_design(
    design: &IpfDesign,
    initial: &[f64],
    marginals: &TractMarginals,
    config: &IpfConfig,
) -> Result<FittedWeights, IpfError> {
    design.check(marginals)?;
    if initial.len() != design.n_records {
        return Err(IpfError::LengthMismatch {
            counts: initial.len(),
            records: design.n_records,
        });
    }
    if let Some((index, &value)) = initial
        .iter()
        .enumerate()
        .find(|(_, w)| !w.is_finite() || **w < 0.0)
    {
        return Err(IpfError::BadWeight { index, value });
    }
    let active: Vec<usize> = (0..design.variables.len())
        .filter(|&v| {
            !marginals
                .zero_total_variables
                .contains(&design.variables[v])
        })
        .collect();

    let mut weights = initial.to_vec();
    let mut iterations_used = 0;
    let mut converged = false;
    let mut max_rel_error = f64::INFINITY;
    for sweep in 1..=config.max_sweeps {
        for &v in &active {
            rake_variable(
                &mut weights,
                &design.categories[v],
                &marginals.margins[v].counts,
            );
        }
        iterations_used = sweep;
        max_rel_error = max_relative_error(design, &weights, marginals, &active);
        if max_rel_error <= config.rel_tolerance {
            converged = true;
            break;
        }
    }

    let mut tae = 0.0;
    let mut unreachable = Vec::new();
    for (v, margin) in marginals.margins.iter().enumerate() {
        let fitted = design.weighted_counts(v, &weights);
        for (k, (&f, &t)) in fitted.iter().zip(&margin.counts).enumerate() {
            tae += (f - t).abs();
            if f == 0.0 && t > 0.0 {
                unreachable.push(UnreachableCategory {
                    variable: margin.variable.clone(),
                    code: margin.codes[k],
                    target: t,
                });
            }
        }
    }
    let unreachable_mass = unreachable.iter().map(|u| u.target).sum();
    for u in &unreachable {
        warn!(
            "tract {}: `{}` = {} has target {} but no survey support",
            marginals.geoid, u.variable, u.code, u.target
        );
    }
    if !converged {
        warn!(
            "tract {}: IPF stopped after {} sweeps with max relative error {:.3e}",
            marginals.geoid, iterations_used, max_rel_error
        );
    }
    Ok(FittedWeights {
        geoid: marginals.geoid.clone(),
        weights,
        iterations_used,
        converged,
        max_rel_error,
        tae,
        unreachable_mass,
        unreachable,
    })
}

fn max_relative_error(
    design: &IpfDesign,
    weights: &[f64],
    marginals: &TractMarginals,
    active: &[usize],
) -> f64 {
    let scale = marginals.population_total.max(f64::MIN_POSITIVE);
    let mut worst: f64 = 0.0;
    for &v in active {
        let fitted = design.weighted_counts(v, weights);
        for (&f, &t) in fitted.iter().zip(&marginals.margins[v].counts) {
            let err = if t > 0.0 {
                if f == 0.0 {
                    // no support; cannot be fixed by reweighting
                    continue;
                }
                (f - t).abs() / t
            } else {
                f / scale
            };
            worst = worst.max(err);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::codebook::Codebook;
    use crate::ipf::Margin;

    fn ab_codebook() -> Arc<Codebook> {
        Arc::new(
            Codebook::from_json_str(
                r#"{"variables":[
                  {"name":"a","codes":[1,2],"role":"demographic"},
                  {"name":"b","codes":[1,2],"role":"demographic"},
                  {"name":"ins","codes":[1,88],"role":"health"}]}"#,
            )
            .unwrap(),
        )
    }

    fn tract(a: &[f64], b: &[f64]) -> TractMarginals {
        TractMarginals {
            geoid: "t".into(),
            margins: vec![
                Margin {
                    variable: "a".into(),
                    codes: vec![1, 2],
                    counts: a.to_vec(),
                },
                Margin {
                    variable: "b".into(),
                    codes: vec![1, 2],
                    counts: b.to_vec(),
                },
            ],
            population_total: a.iter().sum(),
            zero_total_variables: vec![],
        }
    }

    fn four_records(weights: Option<Vec<f64>>) -> SurveyDataset {
        SurveyDataset::from_rows(
            ab_codebook(),
            vec![vec![1, 1, 1], vec![1, 2, 1], vec![2, 1, 1], vec![2, 2, 1]],
            weights,
            "toy",
        )
        .unwrap()
    }

    #[test]
    fn four_record_example() {
        let fit = ipf_fit(
            &four_records(None),
            &tract(&[3.0, 1.0], &[2.0, 2.0]),
            &IpfConfig::default(),
        )
        .unwrap();
        assert!(fit.converged);
        assert!(fit.iterations_used <= 2);
        for (w, e) in fit.weights.iter().zip([1.5, 1.5, 0.5, 0.5]) {
            assert!((w - e).abs() < 1e-10);
        }
        assert!(fit.tae < 1e-9);
        assert_eq!(fit.unreachable_mass, 0.0);
    }

    #[test]
    fn fixed_point_takes_one_sweep() {
        let survey = four_records(Some(vec![2.0, 1.0, 1.0, 3.0]));
        let fit = ipf_fit(
            &survey,
            &tract(&[3.0, 4.0], &[3.0, 4.0]),
            &IpfConfig::default(),
        )
        .unwrap();
        assert_eq!(fit.iterations_used, 1);
        assert_eq!(fit.weights, vec![2.0, 1.0, 1.0, 3.0]);
    }

    #[test]
    fn zero_support_category_accumulates_unreachable_mass() {
        // no record has b = 2
        let survey =
            SurveyDataset::from_rows(ab_codebook(), vec![vec![1, 1, 1], vec![2, 1, 1]], None, "x")
                .unwrap();
        let fit = ipf_fit(
            &survey,
            &tract(&[15.0, 5.0], &[10.0, 10.0]),
            &IpfConfig::default(),
        )
        .unwrap();
        assert_eq!(fit.unreachable_mass, 10.0);
        assert_eq!(fit.unreachable.len(), 1);
        assert_eq!(fit.unreachable[0].code, 2);
    }

    #[test]
    fn initial_weights_cases() {
        let cb = ab_codebook();
        let plain =
            SurveyDataset::from_rows(cb.clone(), vec![vec![1, 1, 1]; 4], None, "x").unwrap();
        assert_eq!(initial_weights(&plain).unwrap(), vec![1.0; 4]);
        let weighted = SurveyDataset::from_rows(
            cb.clone(),
            vec![vec![1, 1, 1]; 3],
            Some(vec![2.0, 1.0, 1.0]),
            "x",
        )
        .unwrap();
        assert_eq!(initial_weights(&weighted).unwrap(), vec![2.0, 1.0, 1.0]);
        let empty = SurveyDataset::from_rows(cb, vec![], None, "x").unwrap();
        assert!(matches!(
            initial_weights(&empty),
            Err(IpfError::EmptySurvey)
        ));
    }

    #[test]
    fn rake_hits_targets() {
        let mut w = vec![1.0, 2.0, 3.0, 4.0];
        let cats = [0, 1, 0, 2];
        let unreachable = rake_variable(&mut w, &cats, &[8.0, 1.0, 2.0]);
        assert!(unreachable.is_empty());
        assert_eq!(tally(&cats, &w, 3), vec![8.0, 1.0, 2.0]);
    }

    #[test]
    fn mismatched_design_rejected() {
        let mut t = tract(&[1.0, 1.0], &[1.0, 1.0]);
        t.margins.swap(0, 1);
        let survey = four_records(None);
        let design = IpfDesign::new(&survey, &["a".into(), "b".into()]).unwrap();
        assert!(matches!(
            ipf_fit_with_design(&design, &[1.0; 4], &t, &IpfConfig::default()),
            Err(IpfError::DesignMismatch { .. })
        ));
    }

    #[test]
    fn zero_total_variable_skipped() {
        let mut t = tract(&[3.0, 1.0], &[0.0, 0.0]);
        t.zero_total_variables.push("b".into());
        let fit = ipf_fit(&four_records(None), &t, &IpfConfig::default()).unwrap();
        assert!(fit.converged);
        assert_eq!(fit.weights, vec![1.5, 1.5, 0.5, 0.5]);
    }
}
