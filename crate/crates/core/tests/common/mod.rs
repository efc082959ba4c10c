//! Reference implementations used as oracles by the integration tests.
#![allow(dead_code)]

use std::sync::Arc;

use popsynth_core::codebook::{Code, Codebook, SurveyDataset};
use popsynth_core::ipf::{Margin, TractMarginals};

/// Entropy in bits.
fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.log2())
        .sum::<f64>()
}

/// KL(P||Q) in bits, summed term by term with natural logs.
pub fn kl_oracle(p: &[f64], q: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..p.len() {
        if p[i] == 0.0 {
            continue;
        }
        if q[i] == 0.0 {
            return f64::INFINITY;
        }
        total += p[i] * (p[i] / q[i]).ln();
    }
    total / std::f64::consts::LN_2
}

/// JS(P,Q) in bits via the entropy identity H(M) - (H(P) + H(Q)) / 2.
pub fn js_oracle(p: &[f64], q: &[f64]) -> f64 {
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    entropy(&m) - 0.5 * (entropy(p) + entropy(q))
}

/// Codebook of `dims.len()` variables `v0, v1, ...` with codes `1..=dims[i]`.
pub fn grid_codebook(dims: &[usize]) -> Arc<Codebook> {
    let vars: Vec<String> = dims
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            let codes: Vec<String> = (1..=d).map(|c| c.to_string()).collect();
            format!(
                r#"{{"name":"v{i}","codes":[{}],"role":"demographic"}}"#,
                codes.join(",")
            )
        })
        .collect();
    Arc::new(Codebook::from_json_str(&format!(r#"{{"variables":[{}]}}"#, vars.join(","))).unwrap())
}

pub fn names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("v{i}")).collect()
}

/// Weighted category totals of every variable.
pub fn weighted_margins(rows: &[Vec<Code>], weights: &[f64], dims: &[usize]) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = dims.iter().map(|&d| vec![0.0; d]).collect();
    for (row, w) in rows.iter().zip(weights) {
        for (v, &code) in row.iter().enumerate() {
            out[v][(code - 1) as usize] += w;
        }
    }
    out
}

pub fn tract(geoid: &str, dims: &[usize], targets: &[Vec<f64>]) -> TractMarginals {
    TractMarginals {
        geoid: geoid.into(),
        margins: targets
            .iter()
            .enumerate()
            .map(|(v, t)| Margin {
                variable: format!("v{v}"),
                codes: (1..=dims[v] as Code).collect(),
                counts: t.clone(),
            })
            .collect(),
        population_total: targets[0].iter().sum(),
        zero_total_variables: Vec::new(),
    }
}

pub fn dataset(dims: &[usize], rows: &[Vec<Code>], weights: Option<Vec<f64>>) -> SurveyDataset {
    SurveyDataset::from_rows(grid_codebook(dims), rows.to_vec(), weights, "test").unwrap()
}

/// Textbook raking: for each variable in turn scan all records, sum weight
/// per category, scale. Stops once every supported category is within
/// `tol` relative error, or after `max_sweeps`.
pub fn ipf_oracle(
    rows: &[Vec<Code>],
    initial: &[f64],
    targets: &[Vec<f64>],
    tol: f64,
    max_sweeps: usize,
) -> (Vec<f64>, usize) {
    let mut w = initial.to_vec();
    let total: f64 = targets[0].iter().sum();
    for sweep in 1..=max_sweeps {
        for (v, t) in targets.iter().enumerate() {
            for (k, &target) in t.iter().enumerate() {
                let code = k as Code + 1;
                let current: f64 = rows
                    .iter()
                    .zip(&w)
                    .filter(|(r, _)| r[v] == code)
                    .map(|(_, x)| x)
                    .sum();
                if current > 0.0 {
                    let f = target / current;
                    for (r, x) in rows.iter().zip(w.iter_mut()) {
                        if r[v] == code {
                            *x *= f;
                        }
                    }
                }
            }
        }
        let mut worst: f64 = 0.0;
        for (v, t) in targets.iter().enumerate() {
            for (k, &target) in t.iter().enumerate() {
                let code = k as Code + 1;
                let fitted: f64 = rows
                    .iter()
                    .zip(&w)
                    .filter(|(r, _)| r[v] == code)
                    .map(|(_, x)| x)
                    .sum();
                if target > 0.0 && fitted > 0.0 {
                    worst = worst.max((fitted - target).abs() / target);
                } else if target == 0.0 {
                    worst = worst.max(fitted / total);
                }
            }
        }
        if worst <= tol {
            return (w, sweep);
        }
    }
    (w, max_sweeps)
}
