//! Command-line driver for the npb-hte analyses: configuration, command
//! execution and report emission.

pub mod commands;
pub mod config;
pub mod contour;
pub mod error;
pub mod output;

use std::path::PathBuf;

pub use commands::{run, Command};
pub use config::{Overrides, RunConfig};
pub use error::{CliError, CliResult};

/// Environment variable capping the worker-thread count.
pub const THREADS_ENV: &str = "NPB_HTE_THREADS";

/// Sizes the global thread pool from `NPB_HTE_THREADS` when it is set.
pub fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| CliError::Config(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Config(format!("cannot size thread pool: {e}")))
}

/// Loads the configuration, runs the command and writes all outputs.
pub fn execute(command: Command, overrides: &Overrides) -> CliResult<Vec<PathBuf>> {
    let cfg = RunConfig::load(overrides)?;
    let files = run(command, &cfg)?;
    output::commit(&cfg.out_dir(), &files)
}
