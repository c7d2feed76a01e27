//! Pipeline stages behind the `cbred` command.

pub mod artifacts;
pub mod config;
pub mod error;
pub mod stages;

pub use artifacts::Stage;
pub use config::RunConfig;
pub use error::{CliError, CliResult};

/// Runs `f` on a pool with `threads` workers (0 picks the default).
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> CliResult<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Runs each stage in order under the configured thread count.
pub fn run_pipeline(cfg: &RunConfig, stages: &[Stage]) -> CliResult<Vec<String>> {
    with_threads(cfg.threads, || {
        stages.iter().map(|&s| stages::run_stage(cfg, s)).collect()
    })?
}
