//! Config parsing and experiment commands behind the `fedfta` binary.

pub mod config;
pub mod error;
pub mod runner;

pub use config::{apply_seed_override, parse_config, DataSource, ExperimentConfig};
pub use error::{CliError, ErrorRecord};
pub use runner::{cmd_compare, cmd_gen_data, cmd_run, run_experiment, Comparison, RunOutcome};
