//! Experiment orchestration: configuration, seeding, training loops, metrics
//! logging, the bias analyzer, and the command-line interface.

pub mod bias;
pub mod cli;
pub mod config;
pub mod metrics;
pub mod train;

pub use bias::{analyze_bias, influence_snapshot, BiasConfig, BiasReport};
pub use config::{RunConfig, TaskId};
pub use metrics::{MetricsRecord, MetricsWriter};
pub use train::{run_experiment, RunSummary, Trainer};
