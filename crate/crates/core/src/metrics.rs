//! Divergence and correlation metrics, and the report tables built on them.
//!
//! All logarithms are base 2, so KL is in bits and JS lies in `[0, 1]`.

use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::codebook::{Code, Codebook, CodebookError};
use crate::exec::{map_indexed, Execution};

/// Tolerance on Σp = 1 accepted by [`CategoricalDistribution::new`].
pub const SIMPLEX_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("support mismatch: `{left}` vs `{right}`")]
    SupportMismatch { left: String, right: String },
    #[error("invalid distribution for `{variable}`: {reason}")]
    InvalidDistribution { variable: String, reason: String },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 paired values, got {0}")]
    TooFewValues(usize),
    #[error("zero variance in {0}")]
    ZeroVariance(&'static str),
    #[error("table labels differ")]
    LabelMismatch,
    #[error("candidate `{0}` uses a different codebook than the ground truth")]
    CodebookMismatch(String),
    #[error(transparent)]
    Codebook(#[from] CodebookError),
}

/// Probability vector over a variable's codes, in codebook order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoricalDistribution {
    variable: String,
    codes: Vec<Code>,
    probs: Vec<f64>,
}

impl CategoricalDistribution {
    pub fn new(
        variable: impl Into<String>,
        codes: Vec<Code>,
        probs: Vec<f64>,
    ) -> Result<Self, MetricsError> {
        let variable = variable.into();
        let invalid = |reason: String| MetricsError::InvalidDistribution {
            variable: variable.clone(),
            reason,
        };
        if codes.len() != probs.len() {
            return Err(invalid(format!(
                "{} codes but {} probabilities",
                codes.len(),
                probs.len()
            )));
        }
        if codes.is_empty() {
            return Err(invalid("empty support".into()));
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(invalid(format!("probability {p} outside [0, 1]")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(invalid(format!("probabilities sum to {sum}")));
        }
        Ok(Self::from_parts_unchecked(variable, codes, probs))
    }

    /// Normalizes non-negative counts into a distribution.
    pub fn from_counts(
        variable: impl Into<String>,
        codes: Vec<Code>,
        counts: &[f64],
    ) -> Result<Self, MetricsError> {
        let variable = variable.into();
        let total: f64 = counts.iter().sum();
        if total.is_nan() || total <= 0.0 || counts.iter().any(|c| *c < 0.0) {
            return Err(MetricsError::InvalidDistribution {
                variable,
                reason: "counts must be non-negative with a positive total".into(),
            });
        }
        Self::new(variable, codes, counts.iter().map(|c| c / total).collect())
    }

    pub(crate) fn from_parts_unchecked(
        variable: impl Into<String>,
        codes: Vec<Code>,
        probs: Vec<f64>,
    ) -> Self {
        CategoricalDistribution {
            variable: variable.into(),
            codes,
            probs,
        }
    }

    pub fn variable(&self) -> &str {
        &self.variable
    }

    pub fn codes(&self) -> &[Code] {
        &self.codes
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, code: Code) -> Option<f64> {
        self.codes
            .iter()
            .position(|&c| c == code)
            .map(|i| self.probs[i])
    }

    fn check_support(&self, other: &Self) -> Result<(), MetricsError> {
        if self.variable != other.variable || self.codes != other.codes {
            return Err(MetricsError::SupportMismatch {
                left: self.variable.clone(),
                right: other.variable.clone(),
            });
        }
        Ok(())
    }
}

fn kl_bits(p: &[f64], q: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return f64::INFINITY;
        }
        acc += pi * (pi / qi).log2();
    }
    acc
}

/// KL(P ∥ Q) in bits; `+∞` when P puts mass where Q has none.
pub fn kl_divergence(
    p: &CategoricalDistribution,
    q: &CategoricalDistribution,
) -> Result<f64, MetricsError> {
    p.check_support(q)?;
    Ok(kl_bits(&p.probs, &q.probs))
}

/// Jensen–Shannon divergence in bits, always finite and in `[0, 1]`.
pub fn js_divergence(
    p: &CategoricalDistribution,
    q: &CategoricalDistribution,
) -> Result<f64, MetricsError> {
    p.check_support(q)?;
    let m: Vec<f64> = p
        .probs
        .iter()
        .zip(&q.probs)
        .map(|(a, b)| 0.5 * (a + b))
        .collect();
    let js = 0.5 * kl_bits(&p.probs, &m) + 0.5 * kl_bits(&q.probs, &m);
    // rounding can leave a few ulps outside the bounds
    Ok(js.clamp(0.0, 1.0))
}

/// Pearson product-moment correlation.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    if x.len() != y.len() {
        return Err(MetricsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(MetricsError::TooFewValues(x.len()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(MetricsError::ZeroVariance("x"));
    }
    if syy == 0.0 {
        return Err(MetricsError::ZeroVariance("y"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Anything that can report a categorical marginal per codebook variable:
/// survey datasets (design-weighted) and synthetic populations (counts).
pub trait CategoricalSource {
    fn codebook(&self) -> &Codebook;
    fn marginal(&self, variable: &str) -> Result<CategoricalDistribution, MetricsError>;
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values
        .into_iter()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// JS divergence per (variable, candidate) with row, column and grand means.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DivergenceTable {
    pub variables: Vec<String>,
    pub labels: Vec<String>,
    /// `cells[row][col]`, rows are variables.
    pub cells: Vec<Vec<f64>>,
    pub row_means: Vec<f64>,
    pub column_means: Vec<f64>,
    pub grand_mean: f64,
}

impl DivergenceTable {
    /// Builds a table from raw cells, computing all means.
    pub fn from_cells(
        variables: Vec<String>,
        labels: Vec<String>,
        cells: Vec<Vec<f64>>,
    ) -> Result<Self, MetricsError> {
        if cells.len() != variables.len() {
            return Err(MetricsError::LengthMismatch(cells.len(), variables.len()));
        }
        if let Some(row) = cells.iter().find(|r| r.len() != labels.len()) {
            return Err(MetricsError::LengthMismatch(row.len(), labels.len()));
        }
        let row_means = cells.iter().map(|r| mean(r.iter().copied())).collect();
        let column_means = (0..labels.len())
            .map(|j| mean(cells.iter().map(|r| r[j])))
            .collect();
        let grand_mean = mean(cells.iter().flatten().copied());
        Ok(DivergenceTable {
            variables,
            labels,
            cells,
            row_means,
            column_means,
            grand_mean,
        })
    }

    pub fn cell(&self, variable: &str, label: &str) -> Option<f64> {
        let i = self.variables.iter().position(|v| v == variable)?;
        let j = self.labels.iter().position(|l| l == label)?;
        Some(self.cells[i][j])
    }

    /// Sub-table restricted to `labels`, in the given order.
    pub fn select_columns(&self, labels: &[String]) -> Result<Self, MetricsError> {
        let idx: Vec<usize> = labels
            .iter()
            .map(|l| {
                self.labels
                    .iter()
                    .position(|x| x == l)
                    .ok_or(MetricsError::LabelMismatch)
            })
            .collect::<Result<_, _>>()?;
        let cells = self
            .cells
            .iter()
            .map(|r| idx.iter().map(|&j| r[j]).collect())
            .collect();
        Self::from_cells(self.variables.clone(), labels.to_vec(), cells)
    }

    /// Display CSV: three decimals, `Row Mean` column and `Column Mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str("variable");
        for l in &self.labels {
            out.push(',');
            out.push_str(&csv_field(l));
        }
        out.push_str(",Row Mean\n");
        for (i, v) in self.variables.iter().enumerate() {
            out.push_str(&csv_field(v));
            for c in &self.cells[i] {
                let _ = write!(out, ",{c:.3}");
            }
            let _ = writeln!(out, ",{:.3}", self.row_means[i]);
        }
        out.push_str("Column Mean");
        for c in &self.column_means {
            let _ = write!(out, ",{c:.3}");
        }
        let _ = writeln!(out, ",{:.3}", self.grand_mean);
        out
    }
}

/// Cellwise `after - before`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaTable {
    pub variables: Vec<String>,
    pub labels: Vec<String>,
    pub cells: Vec<Vec<f64>>,
}

impl DeltaTable {
    pub fn cell(&self, variable: &str, label: &str) -> Option<f64> {
        let i = self.variables.iter().position(|v| v == variable)?;
        let j = self.labels.iter().position(|l| l == label)?;
        Some(self.cells[i][j])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variable");
        for l in &self.labels {
            out.push(',');
            out.push_str(&csv_field(l));
        }
        out.push('\n');
        for (i, v) in self.variables.iter().enumerate() {
            out.push_str(&csv_field(v));
            for c in &self.cells[i] {
                // avoid printing "-0.000"
                let shown = if c.abs() < 0.0005 { 0.0 } else { *c };
                let _ = write!(out, ",{shown:.3}");
            }
            out.push('\n');
        }
        out
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Builds the truth-vs-candidates JS table.
pub fn divergence_table<T, C>(
    truth: &T,
    candidates: &[(String, &C)],
    variables: &[String],
    exec: Execution,
) -> Result<DivergenceTable, MetricsError>
where
    T: CategoricalSource + Sync + ?Sized,
    C: CategoricalSource + Sync + ?Sized,
{
    for (label, cand) in candidates {
        if cand.codebook() != truth.codebook() {
            return Err(MetricsError::CodebookMismatch(label.clone()));
        }
    }
    let truth_marginals = variables
        .iter()
        .map(|v| truth.marginal(v))
        .collect::<Result<Vec<_>, _>>()?;
    let ncol = candidates.len();
    let flat = map_indexed(exec, variables.len() * ncol, |k| {
        let (i, j) = (k / ncol, k % ncol);
        let cand = candidates[j].1.marginal(&variables[i])?;
        js_divergence(&truth_marginals[i], &cand)
    });
    let flat = flat.into_iter().collect::<Result<Vec<_>, _>>()?;
    let cells = if ncol == 0 {
        vec![Vec::new(); variables.len()]
    } else {
        flat.chunks(ncol).map(<[f64]>::to_vec).collect()
    };
    DivergenceTable::from_cells(
        variables.to_vec(),
        candidates.iter().map(|(l, _)| l.clone()).collect(),
        cells,
    )
}

pub fn divergence_delta(
    before: &DivergenceTable,
    after: &DivergenceTable,
) -> Result<DeltaTable, MetricsError> {
    if before.variables != after.variables || before.labels != after.labels {
        return Err(MetricsError::LabelMismatch);
    }
    let cells = before
        .cells
        .iter()
        .zip(&after.cells)
        .map(|(b, a)| a.iter().zip(b).map(|(x, y)| x - y).collect())
        .collect();
    Ok(DeltaTable {
        variables: before.variables.clone(),
        labels: before.labels.clone(),
        cells,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryResidual {
    pub code: Code,
    pub truth_share: f64,
    pub model_share: f64,
    /// `truth - model`; negative means the model overestimates.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualReport {
    pub variable: String,
    pub categories: Vec<CategoryResidual>,
}

impl ResidualReport {
    pub fn residuals(&self) -> Vec<f64> {
        self.categories.iter().map(|c| c.residual).collect()
    }
}

pub fn category_residuals(
    truth: &CategoricalDistribution,
    model: &CategoricalDistribution,
) -> Result<ResidualReport, MetricsError> {
    truth.check_support(model)?;
    let categories = truth
        .codes
        .iter()
        .zip(truth.probs.iter().zip(&model.probs))
        .map(|(&code, (&t, &m))| CategoryResidual {
            code,
            truth_share: t,
            model_share: m,
            residual: t - m,
        })
        .collect();
    Ok(ResidualReport {
        variable: truth.variable.clone(),
        categories,
    })
}
