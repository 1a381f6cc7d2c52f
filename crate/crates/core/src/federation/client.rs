//! Client state machine: local incremental learning and broadcast handling.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::FrozenBackbone;
use crate::distill::{self, ConsolidationSpec, DistillError, OptimizerSettings};
use crate::enhancer::{assign_new_classes, ClassId, EnhancerError, EnhancerGroup, EnhancerPool, GroupId, SelectModule};
use crate::federation::derive_seed;
use crate::federation::wire::{self, GroupUpload, WireError};
use crate::memory::{self, LabelDistribution, LabeledSample, MemoryError, SampleMemory};
use crate::tensor::{Activation, Tensor};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("class {0} is neither known nor declared new")]
    UnknownClass(ClassId),
    #[error("group {group} shape (D, d, b) = {got:?} does not match local {expected:?}")]
    ShapeMismatch {
        group: GroupId,
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("broadcast for group {0} which is not in the local pool")]
    UnknownGroup(GroupId),
    #[error(transparent)]
    Enhancer(#[from] EnhancerError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Wire(#[from] WireError),
}

pub type Result<T> = std::result::Result<T, ClientError>;

/// Per-phase training settings shared by all clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSettings {
    pub bottleneck: usize,
    #[serde(default)]
    pub activation: Activation,
    /// Temporary-group (and fine-tune baseline) training.
    pub temp: OptimizerSettings,
    /// Local consolidation.
    pub local: OptimizerSettings,
    /// Size of the augmented distillation set `U`.
    pub distill_size: usize,
    /// Standard deviation of the Gaussian augmentation noise.
    pub augment_sigma: f64,
    pub seed: u64,
}

/// One task as seen by one client.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientTask {
    pub task_id: u32,
    /// Declared `M^t`, including classes this client holds no samples of.
    pub new_classes: Vec<ClassId>,
    pub samples: Vec<LabeledSample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BroadcastOutcome {
    Applied,
    /// Bytes equal the local copy; nothing changed.
    Unchanged,
    /// Client offline; delivered on the next online tick.
    Queued,
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: u32,
    pub pool: EnhancerPool,
    pub selector: Arc<SelectModule>,
    pub memory: SampleMemory,
    /// Last task this client trained on.
    pub task_id: u32,
    pub online: bool,
    inbox: Vec<Vec<u8>>,
}

/// Groups the task's samples by destination group. New classes go to the
/// selector's assignment; known classes to the group that owns them.
type Routing = BTreeMap<GroupId, (Vec<ClassId>, Vec<LabeledSample>)>;

impl ClientState {
    pub fn new(client_id: u32, pool: EnhancerPool, selector: Arc<SelectModule>, memory: SampleMemory) -> Self {
        Self {
            client_id,
            pool,
            selector,
            memory,
            task_id: 0,
            online: true,
            inbox: vec![],
        }
    }

    pub fn inbox_len(&self) -> usize {
        self.inbox.len()
    }

    fn route(&mut self, task: &ClientTask, backbone: &FrozenBackbone) -> Result<Routing> {
        let known = self.pool.all_classes();
        let declared: BTreeSet<ClassId> = task.new_classes.iter().copied().filter(|c| !known.contains(c)).collect();
        if let Some(s) = task
            .samples
            .iter()
            .find(|s| !known.contains(&s.label) && !declared.contains(&s.label))
        {
            return Err(ClientError::UnknownClass(s.label));
        }

        let unassigned: Vec<ClassId> = declared
            .iter()
            .copied()
            .filter(|&c| self.selector.group_of(c).is_none())
            .collect();
        if !unassigned.is_empty() {
            let batches: Vec<(ClassId, Vec<&Tensor>)> = unassigned
                .iter()
                .map(|&c| (c, task.samples.iter().filter(|s| s.label == c).map(|s| &s.sample).collect()))
                .filter(|(_, v): &(ClassId, Vec<&Tensor>)| !v.is_empty())
                .collect();
            if !batches.is_empty() {
                assign_new_classes(&batches, &self.pool, Arc::make_mut(&mut self.selector), backbone)?;
            }
        }

        let mut routing = Routing::new();
        for &c in &declared {
            if let Some(g) = self.selector.group_of(c) {
                routing.entry(g).or_default().0.push(c);
            }
        }
        for s in &task.samples {
            let g = match self.pool.group_of(s.label) {
                Some(g) => g,
                None => self
                    .selector
                    .group_of(s.label)
                    .ok_or(ClientError::UnknownClass(s.label))?,
            };
            routing.entry(g).or_default().1.push(s.clone());
        }
        routing.retain(|_, (_, samples)| !samples.is_empty());
        Ok(routing)
    }

    /// Local incremental round: route, train a temporary group per touched
    /// group, store exemplars, consolidate locally, and emit one upload per
    /// touched group that gained classes.
    pub fn client_round(
        &mut self,
        task: &ClientTask,
        backbone: &FrozenBackbone,
        settings: &ClientSettings,
    ) -> Result<Vec<GroupUpload>> {
        if task.samples.is_empty() {
            return Ok(vec![]);
        }
        let routing = self.route(task, backbone)?;
        self.memory.store_exemplars(&task.samples, backbone)?;
        self.task_id = task.task_id;

        let mut uploads = Vec::new();
        for (group_id, (new_classes, samples)) in routing {
            if new_classes.is_empty() {
                log::debug!("client {} group {group_id}: known classes only, exemplars refreshed", self.client_id);
                continue;
            }
            let seed = derive_seed(settings.seed, &[u64::from(self.client_id), u64::from(task.task_id), u64::from(group_id)]);
            let new_samples: Vec<LabeledSample> = samples.iter().filter(|s| new_classes.contains(&s.label)).cloned().collect();
            if new_samples.is_empty() {
                continue;
            }
            let mut temp = distill::train_temp_group(
                &new_samples,
                &new_classes,
                backbone,
                group_id,
                settings.bottleneck,
                settings.activation,
                seed,
                &settings.temp,
            )?;
            temp.task_id = task.task_id;

            let old = self.pool.get(group_id).ok_or(ClientError::UnknownGroup(group_id))?.clone();
            let domain: Vec<ClassId> = old.domain.iter().chain(&new_classes).copied().collect();
            let stored: Vec<ClassId> = domain.iter().copied().filter(|&c| self.memory.contains(c)).collect();
            let data = memory::build_distill_set(&stored, settings.distill_size, &self.memory, seed ^ 1, settings.augment_sigma)?;
            let spec = ConsolidationSpec {
                optimizer: settings.local.clone(),
                require_full_coverage: stored.len() == domain.len(),
            };
            let merged = distill::consolidate_local(&old, &temp, &data, backbone, &spec)?.group;
            self.pool.install(merged.clone())?;

            let task_dist = LabelDistribution::from_counts(new_samples.iter().map(|s| (s.label, 1)))?;
            let label_distribution =
                LabelDistribution::from_counts(samples.iter().chain(&data).map(|s| (s.label, 1)))?;
            uploads.push(GroupUpload {
                client_id: self.client_id,
                task_id: task.task_id,
                group_id,
                entropy: memory::entropy(&task_dist),
                label_distribution,
                group_bytes: wire::serialize_group(&merged)?,
            });
        }
        Ok(uploads)
    }

    /// Baseline round: no memory, no distillation. Each touched group is
    /// widened with its new classes and trained on the new data alone.
    pub fn finetune_round(
        &mut self,
        task: &ClientTask,
        backbone: &FrozenBackbone,
        settings: &ClientSettings,
    ) -> Result<Vec<GroupUpload>> {
        if task.samples.is_empty() {
            return Ok(vec![]);
        }
        let routing = self.route(task, backbone)?;
        self.task_id = task.task_id;
        let mut uploads = Vec::new();
        for (group_id, (new_classes, samples)) in routing {
            if new_classes.is_empty() || !samples.iter().any(|s| new_classes.contains(&s.label)) {
                continue;
            }
            let seed = derive_seed(settings.seed, &[u64::from(self.client_id), u64::from(task.task_id), u64::from(group_id)]);
            let mut group = self.pool.get(group_id).ok_or(ClientError::UnknownGroup(group_id))?.clone();
            if group.domain.is_empty() {
                group = distill::train_temp_group(
                    &samples,
                    &new_classes,
                    backbone,
                    group_id,
                    settings.bottleneck,
                    settings.activation,
                    seed,
                    &settings.temp,
                )?;
            } else {
                let width = group.width();
                group.widen_head(&new_classes)?;
                init_new_columns(&mut group, width, &new_classes, seed);
                distill::fit_cross_entropy(&mut group, &samples, backbone, seed ^ 2, &settings.temp)?;
            }
            group.task_id = task.task_id;
            self.pool.install(group.clone())?;
            let task_dist = LabelDistribution::from_counts(samples.iter().map(|s| (s.label, 1)))?;
            uploads.push(GroupUpload {
                client_id: self.client_id,
                task_id: task.task_id,
                group_id,
                entropy: memory::entropy(&task_dist),
                label_distribution: task_dist,
                group_bytes: wire::serialize_group(&group)?,
            });
        }
        Ok(uploads)
    }

    /// Applies (or queues, when offline) a broadcast group.
    pub fn receive_broadcast(&mut self, bytes: &[u8]) -> Result<BroadcastOutcome> {
        if !self.online {
            self.inbox.push(bytes.to_vec());
            return Ok(BroadcastOutcome::Queued);
        }
        self.apply(bytes)
    }

    fn apply(&mut self, bytes: &[u8]) -> Result<BroadcastOutcome> {
        let activation = self
            .pool
            .groups()
            .first()
            .and_then(|g| g.enhancers.first())
            .map(|e| e.activation)
            .unwrap_or_default();
        let group = wire::deserialize_group_as(bytes, activation)?;
        let local = self
            .pool
            .get(group.group_id)
            .ok_or(ClientError::UnknownGroup(group.group_id))?;
        let shape = |g: &EnhancerGroup| (g.depth(), g.width(), g.bottleneck());
        if shape(local) != shape(&group) {
            return Err(ClientError::ShapeMismatch {
                group: group.group_id,
                expected: shape(local),
                got: shape(&group),
            });
        }
        if wire::serialize_group(local).ok().as_deref() == Some(bytes) {
            return Ok(BroadcastOutcome::Unchanged);
        }
        self.pool.install(group)?;
        Ok(BroadcastOutcome::Applied)
    }

    /// Delivers queued broadcasts if online, in arrival order.
    pub fn tick(&mut self) -> Vec<Result<BroadcastOutcome>> {
        if !self.online {
            return vec![];
        }
        std::mem::take(&mut self.inbox).iter().map(|b| self.apply(b)).collect()
    }

    /// Replaces the whole local pool and selector with the server's.
    pub fn full_sync(&mut self, groups: &[Vec<u8>], selector: Arc<SelectModule>) -> Result<()> {
        let groups = groups
            .iter()
            .map(|b| wire::deserialize_group(b))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        self.pool = EnhancerPool::from_groups(groups)?;
        self.selector = selector;
        self.inbox.clear();
        Ok(())
    }
}

/// Fills the zero head columns of `classes` with small seeded values so the
/// fine-tune baseline can break symmetry between new classes.
fn init_new_columns(group: &mut EnhancerGroup, width: usize, classes: &[ClassId], seed: u64) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let bound = 1.0 / (width as f64).sqrt();
    let cols = group.domain.len();
    let idx: Vec<usize> = classes.iter().filter_map(|&c| group.class_index(c)).collect();
    let data = group.head.data_mut();
    for r in 0..width {
        for &j in &idx {
            data[r * cols + j] = rng.random_range(-bound..bound);
        }
    }
}
