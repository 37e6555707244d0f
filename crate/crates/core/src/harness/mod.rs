//! Configuration, problem registry and experiment runner.

pub mod config;
pub mod registry;
pub mod run;

pub use config::{validate_config, ExperimentConfig, Mode};
pub use registry::{list_problems, Listing};
pub use run::{run, run_to_dir, Report, RunOutput};
