//! Run reports and the files written from them.
//!
//! `summary.json` holds everything needed to compare two runs byte for byte,
//! so it leaves out wall time; it embeds the config for `replay`.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::enhancer::{ClassId, GroupId};
use crate::federation::{comm_cost, CostTable, EventLog, UploadRecord};
use crate::harness::config::ExperimentConfig;
use crate::harness::run::Algorithm;
use crate::harness::HarnessError;

pub const METRICS_HEADER: &str = "after_task,task,accuracy";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundBytes {
    pub round: usize,
    pub uploads: usize,
    pub upload_bytes: u64,
    pub broadcast_bytes: u64,
    pub consolidations: usize,
}

#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub algorithm: Algorithm,
    /// Row `i`: accuracy on tasks `0..=i` after learning task `i`.
    pub accuracy: Vec<Vec<f64>>,
    /// Accuracy on each task's classes just before it was learned.
    pub pre_task_accuracy: Vec<f64>,
    pub rounds: Vec<RoundBytes>,
    pub uploads: Vec<UploadRecord>,
    pub events: EventLog,
    pub cost: CostTable,
    pub class_to_group: Vec<(ClassId, GroupId)>,
    pub wall_time_secs: f64,
    pub config: ExperimentConfig,
}

impl MetricsReport {
    /// Mean accuracy over all seen classes after the last task (validation
    /// sets are balanced, so this is the mean of the last row).
    pub fn final_average(&self) -> Option<f64> {
        self.accuracy.last().map(|row| row.iter().sum::<f64>() / row.len() as f64)
    }

    /// Mean accuracy over the classes of all but the last task, after the last task.
    pub fn old_class_accuracy(&self) -> Option<f64> {
        let row = self.accuracy.last()?;
        let old = &row[..row.len() - 1];
        (!old.is_empty()).then(|| old.iter().sum::<f64>() / old.len() as f64)
    }

    /// Accuracy on task `task` after the last task.
    pub fn final_task_accuracy(&self, task: usize) -> Option<f64> {
        self.accuracy.last().and_then(|r| r.get(task).copied())
    }

    pub fn metrics_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for (i, row) in self.accuracy.iter().enumerate() {
            for (j, a) in row.iter().enumerate() {
                let _ = writeln!(s, "{i},{j},{a}");
            }
        }
        s
    }

    pub fn summary(&self) -> Summary {
        let widest = self.uploads.iter().max_by_key(|u| (u.payload_floats, u.domain_len));
        let c = &self.config;
        let formula = |labels: usize| {
            comm_cost(
                c.backbone.depth as u64,
                c.backbone.width as u64,
                c.pool.bottleneck as u64,
                labels as u64,
            )
        };
        Summary {
            algorithm: self.algorithm,
            tasks_run: self.accuracy.len(),
            accuracy_matrix: self.accuracy.clone(),
            pre_task_accuracy: self.pre_task_accuracy.clone(),
            final_average_accuracy: self.final_average(),
            old_class_accuracy: self.old_class_accuracy(),
            uploads: self.uploads.len(),
            upload_bytes: self.rounds.iter().map(|r| r.upload_bytes).sum(),
            broadcast_bytes: self.rounds.iter().map(|r| r.broadcast_bytes).sum(),
            consolidations: self.rounds.iter().map(|r| r.consolidations).sum(),
            rounds: self.rounds.clone(),
            backbone_params: self.cost.backbone_params,
            pool_enhancer_params: self.cost.pool_enhancer_params,
            head_params: self.cost.head_params,
            total_params: self.cost.total_params(),
            upload_params_formula: self.cost.upload_params,
            comm_ratio: self.cost.ratio(),
            measured_max_upload_floats: widest.map(|u| u.payload_floats as u64).unwrap_or(0),
            measured_max_upload_domain: widest.map(|u| u.domain_len).unwrap_or(0),
            wire_matches_formula: self
                .uploads
                .iter()
                .all(|u| u.payload_floats as u64 == formula(u.domain_len)),
            class_to_group: self.class_to_group.clone(),
            config: self.config.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub algorithm: Algorithm,
    pub tasks_run: usize,
    pub accuracy_matrix: Vec<Vec<f64>>,
    pub pre_task_accuracy: Vec<f64>,
    pub final_average_accuracy: Option<f64>,
    pub old_class_accuracy: Option<f64>,
    pub uploads: usize,
    pub upload_bytes: u64,
    pub broadcast_bytes: u64,
    pub consolidations: usize,
    pub rounds: Vec<RoundBytes>,
    pub backbone_params: u64,
    pub pool_enhancer_params: u64,
    pub head_params: u64,
    pub total_params: u64,
    /// Per-group upload size with a head over every class of the schedule.
    pub upload_params_formula: u64,
    pub comm_ratio: f64,
    pub measured_max_upload_floats: u64,
    pub measured_max_upload_domain: usize,
    /// Every upload's payload count equals the formula at its domain size.
    pub wire_matches_formula: bool,
    pub class_to_group: Vec<(ClassId, GroupId)>,
    pub config: ExperimentConfig,
}

impl Summary {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("summary serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::Report(e.to_string()))
    }
}

/// Writes `metrics.csv`, `summary.json` and `events.csv` into `dir`.
pub fn write_report(report: &MetricsReport, dir: &Path) -> Result<(), HarnessError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| HarnessError::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    for (name, body) in [
        ("metrics.csv", report.metrics_csv()),
        ("summary.json", report.summary().to_json()),
        ("events.csv", report.events.to_csv()),
    ] {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(io(&path))?;
    }
    Ok(())
}
