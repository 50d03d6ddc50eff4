//! Benchmark harness for kvserve.
//!
//! Each [`Scenario`] drives either an in-process engine on a simulated clock
//! (deterministic, the default) or a running server over HTTP, repeats the
//! workload (3 warmup + 10 measured iterations by default), and reports
//! medians. Speedups are always ratios of medians.

pub mod report;
pub mod scenario;
pub mod stats;
pub mod target;
pub mod workload;

pub use report::Row;
pub use scenario::{run_scenario, BenchConfig, Scenario};
pub use target::{EmbeddedOptions, TargetSpec};

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("target {url} is unreachable: {reason}")]
    TargetUnreachable { url: String, reason: String },
    #[error("scenario failed: {0}")]
    ScenarioFailed(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("no measurements to report")]
    EmptyResults,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("plotting: {0}")]
    Plot(String),
}
