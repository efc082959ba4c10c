//! Survey schema: variables, their valid integer response codes and the
//! record/dataset types validated against them.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{CategoricalDistribution, CategoricalSource, MetricsError};

/// Integer response code of a categorical survey item.
pub type Code = i64;

/// One record's codes, stored in codebook variable order.
pub type Row = Arc<[Code]>;

const DEFAULT_CODEBOOK: &str = include_str!("../assets/brfss2023_codebook.json");

#[derive(Debug, Error)]
pub enum CodebookError {
    #[error("codebook parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("duplicate variable name `{name}` at variables[{index}]")]
    DuplicateVariable { name: String, index: usize },
    #[error("variable `{name}` at variables[{index}] has an empty code list")]
    EmptyCodes { name: String, index: usize },
    #[error("variable `{name}` at variables[{index}] lists code {code} more than once")]
    DuplicateCode {
        name: String,
        index: usize,
        code: Code,
    },
    #[error("variable `{name}` at variables[{index}] has a label for code {code}, which is not in its code list")]
    OrphanLabel {
        name: String,
        index: usize,
        code: Code,
    },
    #[error("variable at variables[{index}] has an empty name")]
    EmptyName { index: usize },
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("dataset has zero total weight")]
    ZeroTotalWeight,
    #[error("failed to read codebook {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Demographic,
    Health,
    Behavior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub role: Role,
    pub codes: Vec<Code>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub labels: BTreeMap<Code, String>,
}

impl VariableSpec {
    /// Position of `code` in the declared code order.
    pub fn code_index(&self, code: Code) -> Option<usize> {
        self.codes.iter().position(|&c| c == code)
    }

    pub fn contains(&self, code: Code) -> bool {
        self.codes.contains(&code)
    }

    pub fn label(&self, code: Code) -> Option<&str> {
        self.labels.get(&code).map(String::as_str)
    }
}

#[derive(Serialize, Deserialize)]
struct RawCodebook {
    variables: Vec<VariableSpec>,
}

/// Ordered, validated collection of [`VariableSpec`]s.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "RawCodebook", into = "RawCodebook")]
pub struct Codebook {
    variables: Vec<VariableSpec>,
    index: HashMap<String, usize>,
}

impl PartialEq for Codebook {
    fn eq(&self, other: &Self) -> bool {
        self.variables == other.variables
    }
}

impl TryFrom<RawCodebook> for Codebook {
    type Error = CodebookError;

    fn try_from(raw: RawCodebook) -> Result<Self, Self::Error> {
        Codebook::new(raw.variables)
    }
}

impl From<Codebook> for RawCodebook {
    fn from(cb: Codebook) -> Self {
        RawCodebook {
            variables: cb.variables,
        }
    }
}

impl Codebook {
    pub fn new(variables: Vec<VariableSpec>) -> Result<Self, CodebookError> {
        let mut index = HashMap::with_capacity(variables.len());
        for (i, var) in variables.iter().enumerate() {
            if var.name.trim().is_empty() {
                return Err(CodebookError::EmptyName { index: i });
            }
            if index.insert(var.name.clone(), i).is_some() {
                return Err(CodebookError::DuplicateVariable {
                    name: var.name.clone(),
                    index: i,
                });
            }
            if var.codes.is_empty() {
                return Err(CodebookError::EmptyCodes {
                    name: var.name.clone(),
                    index: i,
                });
            }
            let mut seen = HashSet::with_capacity(var.codes.len());
            for &code in &var.codes {
                if !seen.insert(code) {
                    return Err(CodebookError::DuplicateCode {
                        name: var.name.clone(),
                        index: i,
                        code,
                    });
                }
            }
            if let Some(&code) = var.labels.keys().find(|c| !seen.contains(c)) {
                return Err(CodebookError::OrphanLabel {
                    name: var.name.clone(),
                    index: i,
                    code,
                });
            }
        }
        Ok(Codebook { variables, index })
    }

    /// Parses a JSON codebook document, preserving variable order.
    pub fn from_json_str(doc: &str) -> Result<Self, CodebookError> {
        let raw: RawCodebook = serde_json::from_str(doc).map_err(|e| CodebookError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        Codebook::try_from(raw)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, CodebookError> {
        let path = path.as_ref();
        let doc = std::fs::read_to_string(path).map_err(|source| CodebookError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json_str(&doc)
    }

    /// The shipped 14-variable BRFSS 2023 style codebook.
    pub fn default_brfss() -> Self {
        Self::from_json_str(DEFAULT_CODEBOOK).expect("shipped codebook is well-formed")
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("codebook serializes")
    }

    pub fn len(&self) -> usize {
        self.variables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variables.is_empty()
    }

    pub fn variables(&self) -> &[VariableSpec] {
        &self.variables
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.variables.iter().map(|v| v.name.as_str())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn variable(&self, name: &str) -> Option<&VariableSpec> {
        self.index_of(name).map(|i| &self.variables[i])
    }

    pub fn require(&self, name: &str) -> Result<(usize, &VariableSpec), CodebookError> {
        self.index_of(name)
            .map(|i| (i, &self.variables[i]))
            .ok_or_else(|| CodebookError::UnknownVariable(name.to_string()))
    }
}

/// A single survey response keyed by variable name.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SurveyRecord {
    pub values: BTreeMap<String, Code>,
}

impl SurveyRecord {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, variable: impl Into<String>, code: Code) -> Self {
        self.values.insert(variable.into(), code);
        self
    }

    pub fn get(&self, variable: &str) -> Option<Code> {
        self.values.get(variable).copied()
    }

    /// Builds a record from a row in codebook order.
    pub fn from_row(codebook: &Codebook, row: &[Code]) -> Self {
        SurveyRecord {
            values: codebook
                .names()
                .zip(row)
                .map(|(n, &c)| (n.to_string(), c))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RejectReason {
    Missing { variable: String },
    OutOfRange { variable: String, code: Code },
    Unexpected { variable: String },
}

impl RejectReason {
    pub fn variable(&self) -> &str {
        match self {
            RejectReason::Missing { variable }
            | RejectReason::OutOfRange { variable, .. }
            | RejectReason::Unexpected { variable } => variable,
        }
    }
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RejectReason::Missing { variable } => write!(f, "{variable}: missing"),
            RejectReason::OutOfRange { variable, code } => {
                write!(f, "{variable}: code {code} not in code set")
            }
            RejectReason::Unexpected { variable } => {
                write!(f, "{variable}: not a codebook variable")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Accept,
    Reject(Vec<RejectReason>),
}

impl Verdict {
    pub fn is_accept(&self) -> bool {
        matches!(self, Verdict::Accept)
    }

    pub fn reasons(&self) -> &[RejectReason] {
        match self {
            Verdict::Accept => &[],
            Verdict::Reject(r) => r,
        }
    }
}

/// Checks a record against the codebook. Never repairs a value: every
/// missing, out-of-range or unknown field is listed in the rejection.
pub fn validate_record(record: &SurveyRecord, codebook: &Codebook) -> Verdict {
    let mut reasons = Vec::new();
    for var in codebook.variables() {
        match record.values.get(&var.name) {
            None => reasons.push(RejectReason::Missing {
                variable: var.name.clone(),
            }),
            Some(&code) if !var.contains(code) => reasons.push(RejectReason::OutOfRange {
                variable: var.name.clone(),
                code,
            }),
            Some(_) => {}
        }
    }
    for name in record.values.keys() {
        if codebook.index_of(name).is_none() {
            reasons.push(RejectReason::Unexpected {
                variable: name.clone(),
            });
        }
    }
    if reasons.is_empty() {
        Verdict::Accept
    } else {
        Verdict::Reject(reasons)
    }
}

fn validate_row(row: &[Code], codebook: &Codebook) -> Verdict {
    if row.len() != codebook.len() {
        return validate_record(&SurveyRecord::from_row(codebook, row), codebook);
    }
    let reasons: Vec<_> = codebook
        .variables()
        .iter()
        .zip(row)
        .filter(|(v, c)| !v.contains(**c))
        .map(|(v, &code)| RejectReason::OutOfRange {
            variable: v.name.clone(),
            code,
        })
        .collect();
    if reasons.is_empty() {
        Verdict::Accept
    } else {
        Verdict::Reject(reasons)
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("record {index} is invalid: {}", join_reasons(.reasons))]
    InvalidRecord {
        index: usize,
        reasons: Vec<RejectReason>,
    },
    #[error("weight count {weights} does not match record count {records}")]
    WeightLength { weights: usize, records: usize },
    #[error("weight {index} is {value}; weights must be finite and non-negative")]
    BadWeight { index: usize, value: f64 },
    #[error("design weights are all zero")]
    ZeroTotalWeight,
    #[error("datasets use different codebooks")]
    CodebookMismatch,
}

fn join_reasons(reasons: &[RejectReason]) -> String {
    reasons
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

/// Integer-coded survey records with optional design weights.
///
/// Rows are held in codebook variable order and are immutable once the
/// dataset is built, so rows can be shared with synthetic individuals.
#[derive(Debug, Clone)]
pub struct SurveyDataset {
    codebook: Arc<Codebook>,
    rows: Vec<Row>,
    weights: Option<Vec<f64>>,
    provenance: String,
}

impl PartialEq for SurveyDataset {
    fn eq(&self, other: &Self) -> bool {
        self.codebook == other.codebook
            && self.rows == other.rows
            && self.weights == other.weights
            && self.provenance == other.provenance
    }
}

impl SurveyDataset {
    pub fn from_rows(
        codebook: Arc<Codebook>,
        rows: Vec<Vec<Code>>,
        weights: Option<Vec<f64>>,
        provenance: impl Into<String>,
    ) -> Result<Self, DatasetError> {
        for (index, row) in rows.iter().enumerate() {
            if let Verdict::Reject(reasons) = validate_row(row, &codebook) {
                return Err(DatasetError::InvalidRecord { index, reasons });
            }
        }
        let rows = rows.into_iter().map(Row::from).collect();
        Self::assemble(codebook, rows, weights, provenance.into())
    }

    pub fn from_records(
        codebook: Arc<Codebook>,
        records: &[SurveyRecord],
        weights: Option<Vec<f64>>,
        provenance: impl Into<String>,
    ) -> Result<Self, DatasetError> {
        let mut rows = Vec::with_capacity(records.len());
        for (index, rec) in records.iter().enumerate() {
            if let Verdict::Reject(reasons) = validate_record(rec, &codebook) {
                return Err(DatasetError::InvalidRecord { index, reasons });
            }
            rows.push(codebook.names().map(|n| rec.values[n]).collect::<Row>());
        }
        Self::assemble(codebook, rows, weights, provenance.into())
    }

    fn assemble(
        codebook: Arc<Codebook>,
        rows: Vec<Row>,
        weights: Option<Vec<f64>>,
        provenance: String,
    ) -> Result<Self, DatasetError> {
        if let Some(w) = &weights {
            if w.len() != rows.len() {
                return Err(DatasetError::WeightLength {
                    weights: w.len(),
                    records: rows.len(),
                });
            }
            if let Some((index, &value)) = w
                .iter()
                .enumerate()
                .find(|(_, v)| !v.is_finite() || **v < 0.0)
            {
                return Err(DatasetError::BadWeight { index, value });
            }
            if !w.iter().any(|&v| v > 0.0) {
                return Err(DatasetError::ZeroTotalWeight);
            }
        }
        Ok(SurveyDataset {
            codebook,
            rows,
            weights,
            provenance,
        })
    }

    pub fn codebook(&self) -> &Arc<Codebook> {
        &self.codebook
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[Row] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &Row {
        &self.rows[i]
    }

    pub fn record(&self, i: usize) -> SurveyRecord {
        SurveyRecord::from_row(&self.codebook, &self.rows[i])
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    /// Design weight of record `i`, 1.0 for unweighted data.
    pub fn weight(&self, i: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[i])
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    /// Keeps the first `n` records.
    pub fn truncated(mut self, n: usize) -> Self {
        self.rows.truncate(n);
        if let Some(w) = &mut self.weights {
            w.truncate(n);
        }
        self
    }

    /// Appends `other`'s records. Missing design weights count as 1.0 when
    /// only one side is weighted.
    pub fn concat(&self, other: &SurveyDataset) -> Result<SurveyDataset, DatasetError> {
        if self.codebook != other.codebook {
            return Err(DatasetError::CodebookMismatch);
        }
        let mut rows = self.rows.clone();
        rows.extend(other.rows.iter().cloned());
        let weights = match (&self.weights, &other.weights) {
            (None, None) => None,
            _ => Some(
                (0..self.len())
                    .map(|i| self.weight(i))
                    .chain((0..other.len()).map(|i| other.weight(i)))
                    .collect(),
            ),
        };
        Self::assemble(
            self.codebook.clone(),
            rows,
            weights,
            format!("{}+{}", self.provenance, other.provenance),
        )
    }

    pub fn total_weight(&self) -> f64 {
        match &self.weights {
            Some(w) => w.iter().sum(),
            None => self.rows.len() as f64,
        }
    }
}

/// Weighted (design weights when present, uniform otherwise) share of each
/// code of `variable`, in codebook code order.
pub fn marginal_distribution(
    dataset: &SurveyDataset,
    variable: &str,
) -> Result<CategoricalDistribution, CodebookError> {
    let (col, spec) = dataset.codebook.require(variable)?;
    let mut tally = vec![0.0; spec.codes.len()];
    for (i, row) in dataset.rows.iter().enumerate() {
        // rows are validated on construction
        let k = spec.code_index(row[col]).expect("validated row");
        tally[k] += dataset.weight(i);
    }
    let total: f64 = tally.iter().sum();
    if total <= 0.0 {
        return Err(CodebookError::ZeroTotalWeight);
    }
    Ok(CategoricalDistribution::from_parts_unchecked(
        variable,
        spec.codes.clone(),
        tally.into_iter().map(|t| t / total).collect(),
    ))
}

impl CategoricalSource for SurveyDataset {
    fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    fn marginal(&self, variable: &str) -> Result<CategoricalDistribution, MetricsError> {
        marginal_distribution(self, variable).map_err(MetricsError::from)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sex_only() -> Arc<Codebook> {
        Arc::new(
            Codebook::from_json_str(
                r#"{"variables":[{"name":"sex","codes":[1,2],"role":"demographic"}]}"#,
            )
            .unwrap(),
        )
    }

    fn full_record(cb: &Codebook) -> SurveyRecord {
        SurveyRecord {
            values: cb
                .variables()
                .iter()
                .map(|v| (v.name.clone(), v.codes[0]))
                .collect(),
        }
    }

    #[test]
    fn default_codebook_has_fourteen_variables() {
        let cb = Codebook::default_brfss();
        assert_eq!(cb.len(), 14);
        let names: Vec<_> = cb.names().collect();
        for n in [
            "sex",
            "age",
            "education",
            "income",
            "race_ethnicity",
            "insurance",
            "general_health",
            "heart_disease",
            "depression",
            "diabetes",
            "smoking",
            "exercise",
            "flu_vaccination",
            "bmi_category",
        ] {
            assert!(names.contains(&n), "{n}");
        }
        assert!(!cb.variable("insurance").unwrap().contains(99));
        assert!(cb.variable("insurance").unwrap().contains(88));
    }

    #[test]
    fn minimal_document() {
        let cb = sex_only();
        assert_eq!(cb.len(), 1);
        assert_eq!(cb.variable("sex").unwrap().codes, vec![1, 2]);
    }

    #[test]
    fn duplicate_code_rejected() {
        let err = Codebook::from_json_str(
            r#"{"variables":[{"name":"sex","codes":[1,1,2],"role":"demographic"}]}"#,
        )
        .unwrap_err();
        assert!(
            matches!(err, CodebookError::DuplicateCode { ref name, code: 1, index: 0 } if name == "sex")
        );
    }

    #[test]
    fn structural_errors_name_the_variable() {
        let dup = r#"{"variables":[{"name":"a","codes":[1],"role":"health"},{"name":"a","codes":[2],"role":"health"}]}"#;
        assert!(matches!(
            Codebook::from_json_str(dup).unwrap_err(),
            CodebookError::DuplicateVariable { index: 1, .. }
        ));
        let empty = r#"{"variables":[{"name":"a","codes":[],"role":"health"}]}"#;
        assert!(matches!(
            Codebook::from_json_str(empty).unwrap_err(),
            CodebookError::EmptyCodes { .. }
        ));
        let orphan =
            r#"{"variables":[{"name":"a","codes":[1],"labels":{"2":"x"},"role":"health"}]}"#;
        assert!(matches!(
            Codebook::from_json_str(orphan).unwrap_err(),
            CodebookError::OrphanLabel { code: 2, .. }
        ));
        let broken = "{\"variables\": [\n  {\"name\": ";
        assert!(matches!(
            Codebook::from_json_str(broken).unwrap_err(),
            CodebookError::Parse { line: 2, .. }
        ));
    }

    #[test]
    fn codebook_json_roundtrip_preserves_order() {
        let cb = Codebook::default_brfss();
        let back = Codebook::from_json_str(&cb.to_json_pretty()).unwrap();
        assert_eq!(cb, back);
        assert_eq!(back.names().next(), Some("sex"));
    }

    #[test]
    fn validate_accepts_complete_record() {
        let cb = Codebook::default_brfss();
        assert_eq!(validate_record(&full_record(&cb), &cb), Verdict::Accept);
    }

    #[test]
    fn validate_rejects_out_of_range_insurance() {
        let cb = Codebook::default_brfss();
        let rec = full_record(&cb).with("insurance", 99);
        let verdict = validate_record(&rec, &cb);
        assert_eq!(verdict.reasons().len(), 1);
        assert_eq!(verdict.reasons()[0].variable(), "insurance");
    }

    #[test]
    fn validate_rejects_missing_and_lists_all() {
        let cb = Codebook::default_brfss();
        let mut rec = full_record(&cb).with("sex", 7);
        rec.values.remove("bmi_category");
        rec.values.insert("shoe_size".into(), 9);
        let verdict = validate_record(&rec, &cb);
        let vars: Vec<_> = verdict.reasons().iter().map(|r| r.variable()).collect();
        assert_eq!(vars, vec!["sex", "bmi_category", "shoe_size"]);
        assert!(matches!(verdict.reasons()[1], RejectReason::Missing { .. }));
    }

    #[test]
    fn marginal_unweighted_and_weighted() {
        let cb = sex_only();
        let ds = SurveyDataset::from_rows(
            cb.clone(),
            vec![vec![1], vec![1], vec![2], vec![2]],
            None,
            "t",
        )
        .unwrap();
        assert_eq!(
            marginal_distribution(&ds, "sex").unwrap().probs(),
            &[0.5, 0.5]
        );

        let ds = SurveyDataset::from_rows(
            cb.clone(),
            vec![vec![1], vec![2]],
            Some(vec![3.0, 1.0]),
            "t",
        )
        .unwrap();
        assert_eq!(
            marginal_distribution(&ds, "sex").unwrap().probs(),
            &[0.75, 0.25]
        );

        let ds = SurveyDataset::from_rows(cb, vec![vec![2]], None, "t").unwrap();
        assert_eq!(
            marginal_distribution(&ds, "sex").unwrap().probs(),
            &[0.0, 1.0]
        );
    }

    #[test]
    fn marginal_errors() {
        let cb = sex_only();
        let ds = SurveyDataset::from_rows(cb.clone(), vec![vec![1]], None, "t").unwrap();
        assert!(matches!(
            marginal_distribution(&ds, "age"),
            Err(CodebookError::UnknownVariable(_))
        ));
        let empty = SurveyDataset::from_rows(cb, vec![], None, "t").unwrap();
        assert!(matches!(
            marginal_distribution(&empty, "sex"),
            Err(CodebookError::ZeroTotalWeight)
        ));
    }

    #[test]
    fn dataset_rejects_bad_inputs() {
        let cb = sex_only();
        assert!(matches!(
            SurveyDataset::from_rows(cb.clone(), vec![vec![3]], None, "t"),
            Err(DatasetError::InvalidRecord { index: 0, .. })
        ));
        assert!(matches!(
            SurveyDataset::from_rows(cb.clone(), vec![vec![1]], Some(vec![0.0]), "t"),
            Err(DatasetError::ZeroTotalWeight)
        ));
        assert!(matches!(
            SurveyDataset::from_rows(cb.clone(), vec![vec![1]], Some(vec![-1.0]), "t"),
            Err(DatasetError::BadWeight { .. })
        ));
        assert!(matches!(
            SurveyDataset::from_rows(cb, vec![vec![1]], Some(vec![1.0, 2.0]), "t"),
            Err(DatasetError::WeightLength { .. })
        ));
    }

    #[test]
    fn from_records_matches_from_rows() {
        let cb = Arc::new(Codebook::default_brfss());
        let rec = full_record(&cb);
        let a =
            SurveyDataset::from_records(cb.clone(), std::slice::from_ref(&rec), None, "x").unwrap();
        assert_eq!(a.record(0), rec);
    }
}
