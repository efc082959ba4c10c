//! Tract-level population synthesis: harmonize marginal constraints, fit
//! survey weights by iterative proportional fitting, integerize with
//! truncate-replicate-sample and expand records into individuals.

mod constraints;
mod fit;
mod synth;
mod trs;

pub use constraints::{
    harmonize_marginals, ConstraintSet, Margin, MarginalRow, TractMarginals,
    DEFAULT_FITTING_VARIABLES,
};
pub use fit::{
    initial_weights, ipf_fit, ipf_fit_with_design, rake_variable, FittedWeights, IpfConfig,
    IpfDesign,
};
pub use synth::{
    expand, synthesize_population, tract_seed, SynthesisConfig, SynthesisError,
    SyntheticIndividual, SyntheticPopulation, TractDiagnostics,
};
pub use trs::{integerize_trs, integerize_trs_to_total, round_half_even};

use thiserror::Error;

use crate::codebook::Code;

#[derive(Debug, Error)]
pub enum IpfError {
    #[error("fitting variable `{0}` is not in the codebook")]
    UnknownFittingVariable(String),
    #[error("line {line}: unknown variable `{variable}`")]
    UnknownVariable { variable: String, line: usize },
    #[error("line {line}: code {code} is not valid for variable `{variable}`")]
    UnknownCode {
        variable: String,
        code: Code,
        line: usize,
    },
    #[error("line {line}: count {count} must be finite and non-negative")]
    BadCount { count: f64, line: usize },
    #[error("line {line}: duplicate count for tract {geoid}, `{variable}` = {code}")]
    DuplicateCount {
        geoid: String,
        variable: String,
        code: Code,
        line: usize,
    },
    #[error("tract {geoid} has no count for `{variable}` = {code}")]
    MissingCount {
        geoid: String,
        variable: String,
        code: Code,
    },
    #[error("tract {geoid}: first fitting variable `{variable}` has zero total")]
    DegenerateTract { geoid: String, variable: String },
    #[error("no fitting variables given")]
    NoFittingVariables,
    #[error("survey has no records")]
    EmptySurvey,
    #[error("replication counts ({counts}) do not match survey records ({records})")]
    LengthMismatch { counts: usize, records: usize },
    #[error("weight {index} is {value}; weights must be finite and non-negative")]
    BadWeight { index: usize, value: f64 },
    #[error("integer total {total} is unreachable from weights (floor sum {floor_sum}, fractional slots {slots})")]
    TotalOutOfReach {
        total: u64,
        floor_sum: u64,
        slots: usize,
    },
    #[error("marginals for tract {geoid} do not match the fitting design")]
    DesignMismatch { geoid: String },
}
