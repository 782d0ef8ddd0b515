//! Experiment driver for the distributed MPC solvers: scenarios, closed-loop runs,
//! CSV/JSON result bundles and run comparison.

pub mod compare;
pub mod error;
pub mod experiment;
pub mod output;
pub mod scenario;

pub use compare::{compare_runs, Comparison};
pub use error::{CliError, Result};
pub use experiment::{
    run_experiment, ExperimentConfig, ExperimentResult, SampleRecord, SolverKind,
};
pub use output::write_outputs;
pub use scenario::{ChainSpec, Scenario};
