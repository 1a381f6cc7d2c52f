//! Experiment configuration, read from TOML.
//!
//! Every table is required except `output`; see `configs/desk.toml` for the
//! canonical, commented example.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::distill::OptimizerSettings;
use crate::federation::ExecutionMode;
use crate::harness::HarnessError;
use crate::tensor::Activation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed for data, client selection and training.
    pub seed: u64,
    #[serde(default)]
    pub mode: ExecutionMode,
    /// Tasks to run, one round per task; at most `stream.tasks`.
    pub rounds: usize,
    pub backbone: BackboneConfig,
    pub pool: PoolConfig,
    pub federation: FederationConfig,
    pub memory: MemoryConfig,
    pub stream: StreamConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolConfig {
    /// `J`.
    pub groups: usize,
    /// `b`.
    pub bottleneck: usize,
    #[serde(default)]
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    /// `K`.
    pub clients: usize,
    pub clients_per_round: usize,
    /// Server waiting window, in logical ticks.
    pub window: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryConfig {
    /// `|S|`, exemplars per client.
    pub capacity: usize,
    /// `γ`, fraction of a class's samples eligible for storage.
    pub store_ratio: f64,
    /// Size of the augmented local distillation set.
    pub distill_size: usize,
    pub augment_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    pub tasks: usize,
    pub classes_per_task: usize,
    /// Upper bound on distinct classes the generator may create.
    pub class_budget: usize,
    /// Training samples each selected client holds per task.
    pub samples_per_client: usize,
    pub val_per_class: usize,
    pub public_per_class: usize,
    /// Tokens per sample; at most `backbone.max_seq_len`.
    pub seq_len: usize,
    /// Standard deviation of class centers around the origin.
    pub separation: f64,
    /// Within-class standard deviation of the sample latent.
    pub spread: f64,
    /// Per-token noise added on top of the sample latent.
    pub token_noise: f64,
    /// Fraction of a task's classes each client sees, `floor(frac·classes)`, at least one.
    pub visibility: f64,
    /// Dirichlet concentration of per-client class proportions.
    pub dirichlet_alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Temporary-group training (also the fine-tune baseline).
    pub temp: OptimizerSettings,
    /// Client-side double distillation.
    pub local: OptimizerSettings,
    /// Server-side multiple distillation.
    pub global: OptimizerSettings,
    pub aux_size: usize,
    pub aux_batch: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub dir: Option<PathBuf>,
}

fn invalid(field: &'static str, reason: impl Into<String>) -> HarnessError {
    HarnessError::Config {
        field,
        reason: reason.into(),
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn total_classes(&self) -> usize {
        self.stream.tasks * self.stream.classes_per_task
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.backbone
            .validate()
            .map_err(|e| invalid("backbone", e.to_string()))?;
        let s = &self.stream;
        if self.pool.groups == 0 {
            return Err(invalid("pool.groups", "must be at least 1"));
        }
        if self.pool.bottleneck == 0 || self.pool.bottleneck >= self.backbone.width {
            return Err(invalid("pool.bottleneck", "must be in 1..width"));
        }
        if self.federation.clients == 0 {
            return Err(invalid("federation.clients", "must be at least 1"));
        }
        if self.federation.clients_per_round == 0 || self.federation.clients_per_round > self.federation.clients {
            return Err(invalid("federation.clients_per_round", "must be in 1..=clients"));
        }
        if self.rounds > s.tasks {
            return Err(invalid("rounds", format!("{} exceeds stream.tasks = {}", self.rounds, s.tasks)));
        }
        if s.classes_per_task == 0 {
            return Err(invalid("stream.classes_per_task", "must be at least 1"));
        }
        if self.total_classes() > s.class_budget {
            return Err(invalid(
                "stream.class_budget",
                format!("schedule needs {} classes, budget is {}", self.total_classes(), s.class_budget),
            ));
        }
        if s.seq_len == 0 || s.seq_len > self.backbone.max_seq_len {
            return Err(invalid("stream.seq_len", "must be in 1..=backbone.max_seq_len"));
        }
        if !(s.visibility > 0.0 && s.visibility <= 1.0) {
            return Err(invalid("stream.visibility", "must be in (0, 1]"));
        }
        if !(s.dirichlet_alpha > 0.0 && s.dirichlet_alpha.is_finite()) {
            return Err(invalid("stream.dirichlet_alpha", "must be positive"));
        }
        for (field, v) in [
            ("stream.separation", s.separation),
            ("stream.spread", s.spread),
            ("stream.token_noise", s.token_noise),
            ("memory.augment_sigma", self.memory.augment_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(field, "must be finite and non-negative"));
            }
        }
        if s.samples_per_client == 0 || s.val_per_class == 0 || s.public_per_class == 0 {
            return Err(invalid("stream", "sample counts must be positive"));
        }
        if !(self.memory.store_ratio > 0.0 && self.memory.store_ratio <= 1.0) {
            return Err(invalid("memory.store_ratio", "must be in (0, 1]"));
        }
        if self.memory.capacity < self.total_classes() {
            return Err(invalid("memory.capacity", "must hold at least one exemplar per class"));
        }
        for (field, o) in [
            ("train.temp", &self.train.temp),
            ("train.local", &self.train.local),
            ("train.global", &self.train.global),
        ] {
            if o.batch_size == 0 || !(o.learning_rate >= 0.0 && o.learning_rate.is_finite()) {
                return Err(invalid(field, "needs batch_size ≥ 1 and a finite learning_rate ≥ 0"));
            }
        }
        if self.train.aux_size == 0 || self.train.aux_batch == 0 || self.memory.distill_size == 0 {
            return Err(invalid("train", "aux_size, aux_batch and memory.distill_size must be positive"));
        }
        Ok(())
    }
}
