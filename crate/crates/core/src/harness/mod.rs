//! Experiment runner: synthetic streams, the FedET and fine-tune pipelines,
//! evaluation and report files.

pub mod config;
pub mod report;
pub mod run;
pub mod stream;

use std::path::PathBuf;

use thiserror::Error;

pub use config::ExperimentConfig;
pub use report::{write_report, MetricsReport, Summary};
pub use run::{evaluate, run_experiment, run_fedet, run_finetune_baseline, Algorithm};
pub use stream::{generate_stream, SyntheticStream};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Parse(String),
    #[error("config field `{field}`: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("stream: {0}")]
    Stream(String),
    #[error("round {round}: {source}")]
    Round {
        round: usize,
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("report: {0}")]
    Report(String),
}
