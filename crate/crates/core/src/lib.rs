//! Survey generation with chat-completion models, spatial microsimulation
//! by iterative proportional fitting, and distributional and small-area
//! evaluation of the resulting populations.

pub mod codebook;
pub mod exec;
pub mod genpipe;
pub mod io;
pub mod ipf;
pub mod metrics;
pub mod sae;

pub use codebook::{Code, Codebook, SurveyDataset, SurveyRecord};
pub use exec::Execution;
pub use ipf::{synthesize_population, ConstraintSet, SynthesisConfig, SyntheticPopulation};
pub use metrics::{js_divergence, kl_divergence, CategoricalDistribution};
