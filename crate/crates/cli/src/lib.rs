//! Experiment harness for the data service: topology launch, load
//! generation with simulated training steps, failure injection, the cost
//! model and report output.

use std::time::Duration;

use thiserror::Error;

pub mod config;
pub mod cost;
pub mod harness;
pub mod report;

pub use config::{ClientStart, ExperimentConfig, FailureSpec, Target, Trigger};
pub use cost::{cost, sharing_cost_bounds, CostError, CostParams, SharingBounds};
pub use harness::{run_experiment, sweep, ClientMetrics, FailureRecord, MetricsReport, Topology};
pub use report::{emit_report, ReportFormat};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("launch failed: {0}")]
    LaunchFailure(String),
    #[error("run exceeded {0:?}")]
    Timeout(Duration),
    #[error("unknown failure target: {0}")]
    UnknownTarget(String),
    #[error("io: {0}")]
    Io(String),
}
