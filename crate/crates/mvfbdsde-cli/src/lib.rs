//! Scenario runner for the `mvfbdsde` toolkit: configuration grammar, report
//! writers and the command pipelines used by the binary.

pub mod config;
pub mod report;
pub mod run;

pub use config::{Command, ConfigError, Scenario, ScenarioConfig};
pub use run::{exit_code, run, CliError, Outcome, EXIT_ERROR, EXIT_OK, EXIT_REFUTED};
