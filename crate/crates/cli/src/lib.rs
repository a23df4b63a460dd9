//! Command-line front end: experiment sweeps, synthetic data generation and
//! analysis of saved models.

pub mod analyze;
pub mod data;
pub mod error;
pub mod kv;
pub mod plan;
pub mod run;
pub mod synth;

pub use analyze::{cmd_analyze, Analysis, AnalyzeKind, AnalyzeOptions};
pub use error::{CliError, Result};
pub use plan::ExperimentPlan;
pub use run::{cmd_run, Cell, Summary};
pub use synth::cmd_gen_synth;
