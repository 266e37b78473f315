//! Config-driven runner for the `levysee` command-line tool.

pub mod config;
pub mod expr;
pub mod run;

pub use config::{parse_config, ConfigErrors, ConfigIssue, OutputFormat, RunConfig};
pub use run::{run, CheckRow, Command, Outcome, RunOptions, Status};
