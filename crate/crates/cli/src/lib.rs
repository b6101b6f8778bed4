//! Config-driven pipelines over `isothermic-core`.
//!
//! Exit codes: 0 when every budgeted residual is met, 1 when a budget is
//! exceeded or the numerics fail, 2 for configuration and I/O errors.

pub mod config;
pub mod pipeline;

use std::path::Path;

pub use config::{PipelineConfig, Tolerances, Validated};
pub use pipeline::{run, Outcome};

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "ISOTHERMIC_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("numerical failure: {0}")]
    Numerical(isothermic_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 2,
            CliError::Numerical(_) => 1,
        }
    }
}

/// Sizes the global thread pool from `ISOTHERMIC_THREADS`, if set.
pub fn init_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = value.trim().parse().map_err(|_| CliError::Config(format!("{THREADS_ENV} must be a positive integer, got `{value}`")))?;
    if n == 0 {
        return Err(CliError::Config(format!("{THREADS_ENV} must be positive")));
    }
    // a second initialization (e.g. in tests) keeps the existing pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Loads, validates and runs the config at `path`.
pub fn run_file(path: &Path) -> Result<Outcome, CliError> {
    let cfg = PipelineConfig::load(path)?.validate()?;
    let base = path.parent().unwrap_or(Path::new("."));
    run(&cfg, base)
}
