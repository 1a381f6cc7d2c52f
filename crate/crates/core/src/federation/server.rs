//! Server state machine: upload buffering per group, window closing, global
//! aggregation and broadcast payloads.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::FrozenBackbone;
use crate::distill::{self, ConsolidationSpec, DistillError};
use crate::enhancer::{assign_new_classes, ClassId, EnhancerError, EnhancerGroup, EnhancerPool, GroupId, SelectModule};
use crate::federation::derive_seed;
use crate::federation::events::EventLog;
use crate::federation::wire::{self, GroupUpload, WireError};
use crate::memory::{self, LabelDistribution, MemoryError, PublicPool};
use crate::tensor::{Activation, Tensor};

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("upload for unknown group {0}")]
    UnknownGroup(GroupId),
    #[error("upload header says group {header}, payload is group {payload}")]
    GroupIdMismatch { header: GroupId, payload: GroupId },
    #[error("upload for group {group} has shape {got:?}, canonical is {expected:?}")]
    ShapeMismatch {
        group: GroupId,
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("uploads for group {group} disagree on the domain")]
    DomainMismatch { group: GroupId },
    #[error("public pool has no samples of class {0}")]
    MissingPublicClass(ClassId),
    #[error(transparent)]
    Enhancer(#[from] EnhancerError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Wire(#[from] WireError),
}

pub type Result<T> = std::result::Result<T, ServerError>;

/// How a closed window turns uploads into the new canonical group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Entropy-aware multiple distillation on auxiliary data.
    Distill,
    /// Plain parameter average of the uploads.
    Average,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerSettings {
    /// Logical ticks a window stays open after its first upload.
    pub window: u64,
    pub aux_size: usize,
    pub aux_batch: usize,
    pub global: ConsolidationSpec,
    pub seed: u64,
    #[serde(default)]
    pub activation: Activation,
}

/// Accepted upload, as measured from its buffers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct UploadRecord {
    pub tick: u64,
    pub client_id: u32,
    pub group_id: GroupId,
    pub task_id: u32,
    pub domain_len: usize,
    /// f32 values in the group payload.
    pub payload_floats: usize,
    /// Encoded upload length.
    pub bytes: usize,
}

#[derive(Debug, Clone)]
struct Window {
    opened: u64,
    uploads: Vec<(GroupUpload, EnhancerGroup)>,
}

/// A consolidated group ready to send to every client.
#[derive(Debug, Clone, PartialEq)]
pub struct Broadcast {
    pub tick: u64,
    pub group_id: GroupId,
    pub uploads: usize,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub pool: EnhancerPool,
    pub selector: Arc<SelectModule>,
    pub public: PublicPool,
    pub settings: ServerSettings,
    pub aggregation: Aggregation,
    pub log: EventLog,
    pub received: Vec<UploadRecord>,
    pending: BTreeMap<GroupId, Window>,
    consolidations: u64,
}

fn shape(g: &EnhancerGroup) -> (usize, usize, usize) {
    (g.depth(), g.width(), g.bottleneck())
}

impl ServerState {
    pub fn new(pool: EnhancerPool, public: PublicPool, settings: ServerSettings, aggregation: Aggregation) -> Self {
        Self {
            pool,
            selector: Arc::new(SelectModule::new()),
            public,
            settings,
            aggregation,
            log: EventLog::new(),
            received: vec![],
            pending: BTreeMap::new(),
            consolidations: 0,
        }
    }

    pub fn pending_groups(&self) -> Vec<GroupId> {
        self.pending.keys().copied().collect()
    }

    pub fn consolidations(&self) -> u64 {
        self.consolidations
    }

    /// Assigns a task's unseen classes to a group from public-pool samples and
    /// updates the shared selector. Returns `None` if nothing was new.
    pub fn declare_classes(
        &mut self,
        tick: u64,
        classes: &[ClassId],
        backbone: &FrozenBackbone,
    ) -> Result<Option<GroupId>> {
        let known = self.pool.all_classes();
        let fresh: Vec<ClassId> = classes
            .iter()
            .copied()
            .filter(|c| !known.contains(c) && self.selector.group_of(*c).is_none())
            .collect();
        if fresh.is_empty() {
            return Ok(None);
        }
        let batches = fresh
            .iter()
            .map(|&c| {
                let s = self.public.get(c).filter(|s| !s.is_empty());
                s.map(|s| (c, s.iter().collect::<Vec<&Tensor>>()))
                    .ok_or(ServerError::MissingPublicClass(c))
            })
            .collect::<Result<Vec<_>>>()?;
        let g = assign_new_classes(&batches, &self.pool, Arc::make_mut(&mut self.selector), backbone)?;
        self.log.push(tick, "assign", None, Some(g), 0, format!("classes={fresh:?}"));
        Ok(Some(g))
    }

    /// Validates and buffers an encoded upload; opens the group's window if
    /// none is pending.
    pub fn receive(&mut self, tick: u64, encoded: &[u8]) -> Result<()> {
        let upload = GroupUpload::decode(encoded)?;
        let bytes = encoded.len() as u64;
        let (client, gid) = (upload.client_id, upload.group_id);
        match self.validate(&upload) {
            Ok(group) => {
                self.log.push(
                    tick,
                    "upload",
                    Some(client),
                    Some(gid),
                    bytes,
                    format!("task={} domain={} entropy={:.6}", upload.task_id, group.domain.len(), upload.entropy),
                );
                self.received.push(UploadRecord {
                    tick,
                    client_id: client,
                    group_id: gid,
                    task_id: upload.task_id,
                    domain_len: group.domain.len(),
                    payload_floats: wire::payload_floats(&upload.group_bytes)?,
                    bytes: encoded.len(),
                });
                let w = self.pending.entry(gid).or_insert_with(|| Window { opened: tick, uploads: vec![] });
                w.uploads.push((upload, group));
                Ok(())
            }
            Err(e) => {
                self.log.push(tick, "reject", Some(client), Some(gid), bytes, e.to_string());
                log::warn!("rejected upload from client {client}: {e}");
                Err(e)
            }
        }
    }

    fn validate(&self, upload: &GroupUpload) -> Result<EnhancerGroup> {
        let canonical = self
            .pool
            .get(upload.group_id)
            .ok_or(ServerError::UnknownGroup(upload.group_id))?;
        let group = wire::deserialize_group_as(&upload.group_bytes, self.settings.activation)?;
        if group.group_id != upload.group_id {
            return Err(ServerError::GroupIdMismatch {
                header: upload.group_id,
                payload: group.group_id,
            });
        }
        if shape(&group) != shape(canonical) {
            return Err(ServerError::ShapeMismatch {
                group: group.group_id,
                expected: shape(canonical),
                got: shape(&group),
            });
        }
        Ok(group)
    }

    /// Closes every window with `tick ≥ opened + W`, in group order, and
    /// returns the resulting broadcasts.
    pub fn advance(&mut self, tick: u64, backbone: &FrozenBackbone) -> Result<Vec<Broadcast>> {
        let due: Vec<GroupId> = self
            .pending
            .iter()
            .filter(|(_, w)| tick >= w.opened + self.settings.window)
            .map(|(g, _)| *g)
            .collect();
        let mut out = Vec::with_capacity(due.len());
        for gid in due {
            let window = self.pending.remove(&gid).expect("due window");
            let q = window.uploads.len();
            let group = self.aggregate(gid, &window, backbone)?;
            // Round through the wire so server and clients hold identical f32 values.
            let bytes = wire::serialize_group(&group)?;
            let canonical = wire::deserialize_group_as(&bytes, self.settings.activation)?;
            self.pool.install(canonical)?;
            self.consolidations += 1;
            self.log.push(
                tick,
                "consolidate",
                None,
                Some(gid),
                0,
                format!("q={q} opened={} domain={}", window.opened, group.domain.len()),
            );
            out.push(Broadcast {
                tick,
                group_id: gid,
                uploads: q,
                bytes,
            });
        }
        Ok(out)
    }

    fn aggregate(&self, gid: GroupId, window: &Window, backbone: &FrozenBackbone) -> Result<EnhancerGroup> {
        let domain = &window.uploads[0].1.domain;
        if window.uploads.iter().any(|(_, g)| &g.domain != domain) {
            return Err(ServerError::DomainMismatch { group: gid });
        }
        let old = self.pool.get(gid).ok_or(ServerError::UnknownGroup(gid))?;
        match self.aggregation {
            Aggregation::Average => Ok(average(old, &window.uploads)),
            Aggregation::Distill => {
                let dists: Vec<&LabelDistribution> = window.uploads.iter().map(|(u, _)| &u.label_distribution).collect();
                let mixed = LabelDistribution::mean_of(&dists)?;
                let seed = derive_seed(self.settings.seed, &[u64::from(gid), self.consolidations]);
                let mut aux = memory::build_auxiliary(
                    &mixed,
                    &self.public,
                    self.settings.aux_size,
                    self.settings.aux_batch,
                    seed,
                )?;
                let teachers: Vec<(&EnhancerGroup, f64)> =
                    window.uploads.iter().map(|(u, g)| (g, u.entropy)).collect();
                let result = distill::consolidate_global(old, &teachers, &mut aux, backbone, &self.settings.global)?;
                Ok(result.group)
            }
        }
    }

    /// Serialized canonical pool, for clients that request a full sync.
    pub fn full_sync_payload(&self) -> Result<Vec<Vec<u8>>> {
        Ok(self
            .pool
            .groups()
            .iter()
            .map(wire::serialize_group)
            .collect::<std::result::Result<_, _>>()?)
    }
}

/// Element-wise mean of the uploaded parameters.
fn average(old: &EnhancerGroup, uploads: &[(GroupUpload, EnhancerGroup)]) -> EnhancerGroup {
    let mut out = uploads[0].1.clone();
    let n = uploads.len() as f64;
    let sums: Vec<Vec<f64>> = (0..out.tensors().len())
        .map(|t| {
            let mut acc = vec![0.0; out.tensors()[t].len()];
            for (_, g) in uploads {
                acc.iter_mut().zip(g.tensors()[t].data()).for_each(|(a, x)| *a += x);
            }
            acc
        })
        .collect();
    for (t, s) in out.tensors_mut().into_iter().zip(sums) {
        t.data_mut().iter_mut().zip(s).for_each(|(x, a)| *x = a / n);
    }
    out.group_id = old.group_id;
    out.task_id = uploads.iter().map(|(_, g)| g.task_id).max().unwrap_or(old.task_id);
    out
}
