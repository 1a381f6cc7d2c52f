//! Temporary-group training and the two consolidation procedures.
//!
//! Local consolidation distills a frozen old group (old classes, first `m`
//! logits) and a frozen temporary group (new classes, last `n` logits) into
//! one group over both, against segment-centered teacher logits with an L2
//! loss. Global consolidation replaces the single temporary teacher with an
//! entropy-weighted mixture of uploaded groups.
//!
//! Both procedures start the student from the old group's enhancers and head
//! with zero columns appended for the new classes, and run plain mini-batch
//! SGD. Per-sample gradients are computed through [`crate::parallel::map`]
//! and summed in batch order.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{BackboneError, FrozenBackbone};
use crate::enhancer::{ClassId, EnhancerError, EnhancerGroup, GroupId};
use crate::memory::{AuxiliaryDataset, LabeledSample};
use crate::parallel;
use crate::tensor::{Activation, Graph, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("training data is empty")]
    EmptyData,
    #[error("label {0} is outside the group domain")]
    LabelOutsideDomain(ClassId),
    #[error("{0} segment is empty")]
    EmptySegment(&'static str),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("class {0} is in both the old and the new domain")]
    OverlappingDomains(ClassId),
    #[error("distillation data has no sample of class {0}")]
    MissingClass(ClassId),
    #[error("upload {index} has domain {got:?}, expected {expected:?}")]
    DomainMismatch {
        index: usize,
        got: Vec<ClassId>,
        expected: Vec<ClassId>,
    },
    #[error("no uploads to consolidate")]
    NoUploads,
    #[error("auxiliary data is empty")]
    EmptyAuxiliary,
    #[error("entropy {0} must be finite and non-negative")]
    InvalidEntropy(f64),
    #[error(transparent)]
    Enhancer(#[from] EnhancerError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, DistillError>;

/// Mini-batch SGD settings.
///
/// Training stops after `max_steps`, or earlier once the loss improved by
/// less than `convergence_threshold` over the last `convergence_window`
/// steps (a window of 0 disables the early stop).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSettings {
    pub learning_rate: f64,
    pub max_steps: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub convergence_window: usize,
    #[serde(default)]
    pub convergence_threshold: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            max_steps: 200,
            batch_size: 16,
            convergence_window: 0,
            convergence_threshold: 0.0,
        }
    }
}

impl OptimizerSettings {
    fn converged(&self, losses: &[f64]) -> bool {
        let w = self.convergence_window;
        if w == 0 || losses.len() <= w {
            return false;
        }
        let now = losses[losses.len() - 1];
        let then = losses[losses.len() - 1 - w];
        then - now < self.convergence_threshold
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsolidationSpec {
    pub optimizer: OptimizerSettings,
    /// Reject distillation data that misses any class of the target domain.
    #[serde(default = "default_true")]
    pub require_full_coverage: bool,
}

fn default_true() -> bool {
    true
}

impl Default for ConsolidationSpec {
    fn default() -> Self {
        Self {
            optimizer: OptimizerSettings::default(),
            require_full_coverage: true,
        }
    }
}

/// Hooks into a consolidation run. All methods default to no-ops.
pub trait DistillObserver {
    /// Teacher targets for the batch about to be used at `step`.
    fn batch_targets(&mut self, _step: usize, _targets: &[Vec<f64>]) {}
    /// Called after the update of `step` with the loss measured before it.
    fn step(&mut self, _step: usize, _loss: f64, _student: &EnhancerGroup) {}
}

impl DistillObserver for () {}

#[derive(Debug, Clone)]
pub struct Consolidation {
    pub group: EnhancerGroup,
    /// Mean batch loss per step, measured before each update.
    pub losses: Vec<f64>,
}

/// Batches handed to global consolidation.
pub trait BatchSource {
    /// Next batch, or `None` once the pass is exhausted.
    fn next_batch(&mut self) -> Option<Vec<LabeledSample>>;
    /// Restart from the first batch.
    fn rewind(&mut self);
}

impl BatchSource for AuxiliaryDataset<'_> {
    fn next_batch(&mut self) -> Option<Vec<LabeledSample>> {
        self.next()
    }

    fn rewind(&mut self) {
        AuxiliaryDataset::rewind(self)
    }
}

/// Endless wrap-around batches over a slice: batch `s` holds items
/// `(s·B + i) mod N` for `i < min(B, N)`. Local consolidation uses the same
/// schedule.
#[derive(Debug, Clone)]
pub struct CyclicBatches<'a> {
    items: &'a [LabeledSample],
    batch_size: usize,
    step: usize,
}

impl<'a> CyclicBatches<'a> {
    pub fn new(items: &'a [LabeledSample], batch_size: usize) -> Self {
        Self {
            items,
            batch_size: batch_size.max(1),
            step: 0,
        }
    }
}

fn cyclic_indices(step: usize, batch: usize, n: usize) -> impl Iterator<Item = usize> {
    let b = batch.min(n);
    (0..b).map(move |i| (step * batch + i) % n)
}

impl BatchSource for CyclicBatches<'_> {
    fn next_batch(&mut self) -> Option<Vec<LabeledSample>> {
        if self.items.is_empty() {
            return None;
        }
        let out = cyclic_indices(self.step, self.batch_size, self.items.len())
            .map(|i| self.items[i].clone())
            .collect();
        self.step += 1;
        Some(out)
    }

    fn rewind(&mut self) {
        self.step = 0;
    }
}

fn center(segment: &[f64]) -> Vec<f64> {
    let mean = segment.iter().sum::<f64>() / segment.len() as f64;
    segment.iter().map(|y| y - mean).collect()
}

/// Double-distillation targets: each segment minus its own mean.
pub fn center_targets_local(old: &[f64], new: &[f64]) -> Result<Vec<f64>> {
    if old.is_empty() {
        return Err(DistillError::EmptySegment("old"));
    }
    if new.is_empty() {
        return Err(DistillError::EmptySegment("new"));
    }
    let mut out = center(old);
    out.extend(center(new));
    Ok(out)
}

/// `H^k / H_sum`, or uniform `1/q` when every entropy is zero.
pub fn entropy_weights(entropies: &[f64]) -> Result<Vec<f64>> {
    if entropies.is_empty() {
        return Err(DistillError::NoUploads);
    }
    if let Some(&h) = entropies.iter().find(|h| !(h.is_finite() && **h >= 0.0)) {
        return Err(DistillError::InvalidEntropy(h));
    }
    let sum: f64 = entropies.iter().sum();
    if sum > 0.0 {
        Ok(entropies.iter().map(|h| h / sum).collect())
    } else {
        let q = entropies.len() as f64;
        Ok(vec![1.0 / q; entropies.len()])
    }
}

/// Entropy-aware multiple-distillation targets. The old segment is centered
/// as in [`center_targets_local`]; the new segment is the entropy-weighted
/// mixture of the uploaded logits, centered. An empty old segment is allowed
/// here (first consolidation of an empty group).
pub fn center_targets_global(old: &[f64], uploads: &[&[f64]], entropies: &[f64]) -> Result<Vec<f64>> {
    if uploads.len() != entropies.len() {
        return Err(DistillError::LengthMismatch {
            left: uploads.len(),
            right: entropies.len(),
        });
    }
    let weights = entropy_weights(entropies)?;
    let n = uploads[0].len();
    if n == 0 {
        return Err(DistillError::EmptySegment("new"));
    }
    let mut mixture = vec![0.0; n];
    for (u, w) in uploads.iter().zip(&weights) {
        if u.len() != n {
            return Err(DistillError::LengthMismatch { left: n, right: u.len() });
        }
        for (m, y) in mixture.iter_mut().zip(u.iter()) {
            *m += w * y;
        }
    }
    let mut out = if old.is_empty() { vec![] } else { center(old) };
    out.extend(center(&mixture));
    Ok(out)
}

/// `(1/c)·Σ (y_i − ẏ_i)²`.
pub fn double_distill_loss(logits: &[f64], targets: &[f64]) -> Result<f64> {
    if logits.len() != targets.len() || logits.is_empty() {
        return Err(DistillError::LengthMismatch {
            left: logits.len(),
            right: targets.len(),
        });
    }
    Ok(logits
        .iter()
        .zip(targets)
        .map(|(y, t)| (y - t) * (y - t))
        .sum::<f64>()
        / logits.len() as f64)
}

/// Same L2 form as [`double_distill_loss`], against entropy-weighted targets.
pub fn emd_loss(logits: &[f64], targets: &[f64]) -> Result<f64> {
    double_distill_loss(logits, targets)
}

/// Mean loss and mean gradient (wire order) over a batch, one graph per item.
fn batch_gradient<T, F>(
    group: &EnhancerGroup,
    backbone: &FrozenBackbone,
    items: &[T],
    sample_of: impl Fn(&T) -> &Tensor + Sync + Send,
    loss_of: F,
) -> Result<(f64, Vec<f64>)>
where
    T: Sync,
    F: for<'g> Fn(&mut Graph<'g>, crate::tensor::Var, &T) -> std::result::Result<crate::tensor::Var, TensorError>
        + Sync
        + Send,
{
    let per_item = parallel::map(items, |item| -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::new();
        let vars = group.bind(&mut g, true);
        let logits = group.logits_graph(&mut g, backbone, &vars, sample_of(item))?;
        let loss = loss_of(&mut g, logits, item)?;
        let value = g.value(loss).item();
        g.backward(loss)?;
        let mut grad = Vec::with_capacity(group.parameter_count());
        for (v, t) in vars.ordered().into_iter().zip(group.tensors()) {
            match g.grad(v) {
                Some(gv) => grad.extend_from_slice(gv),
                None => grad.extend(std::iter::repeat_n(0.0, t.len())),
            }
        }
        Ok((value, grad))
    });
    let mut total = 0.0;
    let mut sum = vec![0.0; group.parameter_count()];
    for r in per_item {
        let (l, g) = r?;
        total += l;
        sum.iter_mut().zip(g).for_each(|(s, x)| *s += x);
    }
    let n = items.len() as f64;
    sum.iter_mut().for_each(|s| *s /= n);
    Ok((total / n, sum))
}

/// Trains a fresh group over `domain` with softmax cross-entropy on `data`.
///
/// Enhancers start as identity (`W_up = 0`) with seeded `W_down`; the head is
/// drawn from `U(±1/sqrt(d))`. Batches walk a seeded permutation of `data`.
#[allow(clippy::too_many_arguments)]
pub fn train_temp_group(
    data: &[LabeledSample],
    domain: &[ClassId],
    backbone: &FrozenBackbone,
    group_id: GroupId,
    bottleneck: usize,
    activation: Activation,
    seed: u64,
    settings: &OptimizerSettings,
) -> Result<EnhancerGroup> {
    if data.is_empty() {
        return Err(DistillError::EmptyData);
    }
    if let Some(s) = data.iter().find(|s| !domain.contains(&s.label)) {
        return Err(DistillError::LabelOutsideDomain(s.label));
    }
    let d = backbone.width();
    let mut group = EnhancerGroup::empty(group_id, backbone.depth(), d, bottleneck, activation, seed)?;
    group.widen_head(domain)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e4d_9a11);
    let bound = 1.0 / (d as f64).sqrt();
    group
        .head
        .data_mut()
        .iter_mut()
        .for_each(|w| *w = rng.random_range(-bound..bound));

    fit_cross_entropy(&mut group, data, backbone, rng.random(), settings)?;
    Ok(group)
}

/// Softmax cross-entropy SGD on `data` over the group's current domain.
/// Batches walk a seeded permutation of `data` with wrap-around. Returns the
/// mean batch loss per step.
pub fn fit_cross_entropy(
    group: &mut EnhancerGroup,
    data: &[LabeledSample],
    backbone: &FrozenBackbone,
    seed: u64,
    settings: &OptimizerSettings,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(DistillError::EmptyData);
    }
    let labels: Vec<usize> = data
        .iter()
        .map(|s| group.class_index(s.label).ok_or(DistillError::LabelOutsideDomain(s.label)))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let indexed: Vec<(&Tensor, usize)> = order.iter().map(|&i| (&data[i].sample, labels[i])).collect();

    let mut losses = Vec::new();
    for step in 0..settings.max_steps {
        let batch: Vec<(&Tensor, usize)> = cyclic_indices(step, settings.batch_size, indexed.len())
            .map(|i| indexed[i])
            .collect();
        let (loss, grad) = batch_gradient(
            group,
            backbone,
            &batch,
            |(s, _)| s,
            |g, logits, (_, label)| g.cross_entropy(logits, &[*label]),
        )?;
        group.sgd_step(&grad, settings.learning_rate);
        losses.push(loss);
        if settings.converged(&losses) {
            break;
        }
    }
    Ok(losses)
}

fn logits_of(group: &EnhancerGroup, backbone: &FrozenBackbone, sample: &Tensor) -> Result<Vec<f64>> {
    Ok(crate::enhancer::group_forward(sample, group, backbone)?)
}

/// One frozen teacher pass per sample: centered `[f_old ; f_t]` logits.
pub fn teacher_targets_local(
    old: &EnhancerGroup,
    temp: &EnhancerGroup,
    samples: &[LabeledSample],
    backbone: &FrozenBackbone,
) -> Result<Vec<Vec<f64>>> {
    parallel::map(samples, |s| {
        let yo = logits_of(old, backbone, &s.sample)?;
        let yt = logits_of(temp, backbone, &s.sample)?;
        center_targets_local(&yo, &yt)
    })
    .into_iter()
    .collect()
}

/// Entropy-weighted targets for a batch. Uploads span `old.domain ++ new`.
pub fn teacher_targets_global(
    old: &EnhancerGroup,
    uploads: &[(&EnhancerGroup, f64)],
    samples: &[LabeledSample],
    backbone: &FrozenBackbone,
) -> Result<Vec<Vec<f64>>> {
    let m = old.domain.len();
    let entropies: Vec<f64> = uploads.iter().map(|(_, h)| *h).collect();
    parallel::map(samples, |s| {
        let yo = if m == 0 { vec![] } else { logits_of(old, backbone, &s.sample)? };
        let ys: Vec<Vec<f64>> = uploads
            .iter()
            .map(|(g, _)| logits_of(g, backbone, &s.sample).map(|y| y[m..].to_vec()))
            .collect::<Result<_>>()?;
        let refs: Vec<&[f64]> = ys.iter().map(|v| v.as_slice()).collect();
        center_targets_global(&yo, &refs, &entropies)
    })
    .into_iter()
    .collect()
}

fn distill_step<O: DistillObserver + ?Sized>(
    student: &mut EnhancerGroup,
    backbone: &FrozenBackbone,
    batch: &[(&Tensor, &[f64])],
    step: usize,
    settings: &OptimizerSettings,
    observer: &mut O,
) -> Result<f64> {
    let (loss, grad) = batch_gradient(
        student,
        backbone,
        batch,
        |(s, _)| s,
        |g, logits, (_, t)| {
            let tv = g.input(Tensor::matrix(1, t.len(), t.to_vec())?);
            g.mse(logits, tv)
        },
    )?;
    student.sgd_step(&grad, settings.learning_rate);
    observer.step(step, loss, student);
    Ok(loss)
}

fn check_coverage(domain: &[ClassId], data: &[LabeledSample], full: bool) -> Result<()> {
    let present: BTreeSet<ClassId> = data.iter().map(|s| s.label).collect();
    if let Some(&c) = present.iter().find(|c| !domain.contains(c)) {
        return Err(DistillError::LabelOutsideDomain(c));
    }
    if full {
        if let Some(&c) = domain.iter().find(|c| !present.contains(c)) {
            return Err(DistillError::MissingClass(c));
        }
    }
    Ok(())
}

/// Local consolidation of `old` and `temp` on the distillation set `data`.
///
/// With an empty old domain there is nothing to preserve and the temporary
/// group is returned under the old group's id.
pub fn consolidate_local(
    old: &EnhancerGroup,
    temp: &EnhancerGroup,
    data: &[LabeledSample],
    backbone: &FrozenBackbone,
    spec: &ConsolidationSpec,
) -> Result<Consolidation> {
    consolidate_local_observed(old, temp, data, backbone, spec, &mut ())
}

pub fn consolidate_local_observed<O: DistillObserver + ?Sized>(
    old: &EnhancerGroup,
    temp: &EnhancerGroup,
    data: &[LabeledSample],
    backbone: &FrozenBackbone,
    spec: &ConsolidationSpec,
    observer: &mut O,
) -> Result<Consolidation> {
    if let Some(&c) = temp.domain.iter().find(|c| old.domain.contains(c)) {
        return Err(DistillError::OverlappingDomains(c));
    }
    if temp.domain.is_empty() {
        return Err(DistillError::EmptySegment("new"));
    }
    if old.domain.is_empty() {
        let mut group = temp.clone();
        group.group_id = old.group_id;
        return Ok(Consolidation { group, losses: vec![] });
    }
    if data.is_empty() {
        return Err(DistillError::EmptyData);
    }
    let mut domain = old.domain.clone();
    domain.extend_from_slice(&temp.domain);
    check_coverage(&domain, data, spec.require_full_coverage)?;

    let targets = teacher_targets_local(old, temp, data, backbone)?;
    let mut student = old.clone();
    student.widen_head(&temp.domain)?;
    student.task_id = temp.task_id;

    let settings = &spec.optimizer;
    let mut losses = Vec::new();
    for step in 0..settings.max_steps {
        let idx: Vec<usize> = cyclic_indices(step, settings.batch_size, data.len()).collect();
        let batch_targets: Vec<Vec<f64>> = idx.iter().map(|&i| targets[i].clone()).collect();
        observer.batch_targets(step, &batch_targets);
        let batch: Vec<(&Tensor, &[f64])> = idx
            .iter()
            .map(|&i| (&data[i].sample, targets[i].as_slice()))
            .collect();
        losses.push(distill_step(&mut student, backbone, &batch, step, settings, observer)?);
        if settings.converged(&losses) {
            break;
        }
    }
    log::debug!(
        "local consolidation of group {}: {} steps, loss {:?} -> {:?}",
        student.group_id,
        losses.len(),
        losses.first(),
        losses.last()
    );
    Ok(Consolidation { group: student, losses })
}

/// Server-side consolidation of `q` uploads of one group against its
/// canonical old version, over batches from `source`.
///
/// Every upload must share one domain that extends `old.domain`. When the old
/// domain is empty the student starts from the highest-weight upload.
pub fn consolidate_global<S: BatchSource + ?Sized>(
    old: &EnhancerGroup,
    uploads: &[(&EnhancerGroup, f64)],
    source: &mut S,
    backbone: &FrozenBackbone,
    spec: &ConsolidationSpec,
) -> Result<Consolidation> {
    consolidate_global_observed(old, uploads, source, backbone, spec, &mut ())
}

pub fn consolidate_global_observed<S: BatchSource + ?Sized, O: DistillObserver + ?Sized>(
    old: &EnhancerGroup,
    uploads: &[(&EnhancerGroup, f64)],
    source: &mut S,
    backbone: &FrozenBackbone,
    spec: &ConsolidationSpec,
    observer: &mut O,
) -> Result<Consolidation> {
    let (first, _) = uploads.first().ok_or(DistillError::NoUploads)?;
    let domain = first.domain.clone();
    let m = old.domain.len();
    if !domain.starts_with(&old.domain) || domain.len() == m {
        return Err(DistillError::DomainMismatch {
            index: 0,
            got: domain,
            expected: old.domain.clone(),
        });
    }
    for (index, (g, _)) in uploads.iter().enumerate() {
        if g.domain != domain {
            return Err(DistillError::DomainMismatch {
                index,
                got: g.domain.clone(),
                expected: domain,
            });
        }
    }
    let weights = entropy_weights(&uploads.iter().map(|(_, h)| *h).collect::<Vec<_>>())?;

    let mut student = if m > 0 {
        let mut s = old.clone();
        s.widen_head(&domain[m..])?;
        s
    } else {
        let mut best = 0;
        for (i, w) in weights.iter().enumerate() {
            if *w > weights[best] {
                best = i;
            }
        }
        uploads[best].0.clone()
    };
    student.group_id = old.group_id;
    student.task_id = uploads.iter().map(|(g, _)| g.task_id).max().unwrap_or(old.task_id);

    source.rewind();
    let settings = &spec.optimizer;
    let mut losses = Vec::new();
    for step in 0..settings.max_steps {
        let batch = match source.next_batch().filter(|b| !b.is_empty()) {
            Some(b) => b,
            None => {
                source.rewind();
                source
                    .next_batch()
                    .filter(|b| !b.is_empty())
                    .ok_or(DistillError::EmptyAuxiliary)?
            }
        };
        check_coverage(&domain, &batch, false)?;
        let targets = teacher_targets_global(old, uploads, &batch, backbone)?;
        observer.batch_targets(step, &targets);
        let pairs: Vec<(&Tensor, &[f64])> = batch
            .iter()
            .zip(&targets)
            .map(|(s, t)| (&s.sample, t.as_slice()))
            .collect();
        losses.push(distill_step(&mut student, backbone, &pairs, step, settings, observer)?);
        if settings.converged(&losses) {
            break;
        }
    }
    log::debug!(
        "global consolidation of group {} (q={}): {} steps, loss {:?} -> {:?}",
        student.group_id,
        uploads.len(),
        losses.len(),
        losses.first(),
        losses.last()
    );
    if settings.max_steps == 0 && source.next_batch().is_none_or(|b| b.is_empty()) {
        return Err(DistillError::EmptyAuxiliary);
    }
    Ok(Consolidation { group: student, losses })
}

/// Largest relative error between analytic and central-difference gradients
/// of `Σ_i [CE(x_i) + L_dd(x_i, t_i)]` over every enhancer and head parameter.
pub fn gradient_audit<'a>(
    group: &'a EnhancerGroup,
    backbone: &'a FrozenBackbone,
    samples: &'a [LabeledSample],
    targets: &[Vec<f64>],
    step: f64,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(DistillError::EmptyData);
    }
    if samples.len() != targets.len() {
        return Err(DistillError::LengthMismatch {
            left: samples.len(),
            right: targets.len(),
        });
    }
    let labels: Vec<usize> = samples
        .iter()
        .map(|s| group.class_index(s.label).ok_or(DistillError::LabelOutsideDomain(s.label)))
        .collect::<Result<_>>()?;
    let target_tensors: Vec<Tensor> = targets
        .iter()
        .map(|t| Tensor::matrix(1, t.len(), t.clone()))
        .collect::<std::result::Result<_, _>>()?;
    let params: Vec<Tensor> = group.tensors().into_iter().cloned().collect();
    let function = |g: &mut Graph<'a>, vars: &[crate::tensor::Var]| {
        let enhancers = vars[..vars.len() - 1]
            .chunks(4)
            .zip(&group.enhancers)
            .map(|(v, e)| crate::backbone::EnhancerVars {
                w_down: v[0],
                b_down: v[1],
                w_up: v[2],
                b_up: v[3],
                activation: e.activation,
            })
            .collect();
        let gv = crate::enhancer::GroupVars {
            enhancers,
            head: vars[vars.len() - 1],
        };
        let mut total: Option<crate::tensor::Var> = None;
        for ((s, &label), t) in samples.iter().zip(&labels).zip(&target_tensors) {
            let logits = group
                .logits_graph(g, backbone, &gv, &s.sample)
                .map_err(|e| TensorError::Invalid {
                    op: "gradient_audit",
                    reason: e.to_string(),
                })?;
            let ce = g.cross_entropy(logits, &[label])?;
            let tv = g.input(t.clone());
            let dd = g.mse(logits, tv)?;
            let l = g.add(ce, dd)?;
            total = Some(match total {
                Some(acc) => g.add(acc, l)?,
                None => l,
            });
        }
        Ok(total.expect("nonempty samples"))
    };
    Ok(crate::tensor::grad_check(function, &params, step)?)
}

/// Fraction of `data` whose argmax logit matches the label.
pub fn accuracy(group: &EnhancerGroup, backbone: &FrozenBackbone, data: &[LabeledSample]) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let hits = parallel::map(data, |s| -> Result<bool> {
        let y = logits_of(group, backbone, &s.sample)?;
        Ok(argmax(&y).map(|i| group.domain[i]) == Some(s.label))
    });
    let mut n = 0usize;
    for h in hits {
        n += usize::from(h?);
    }
    Ok(n as f64 / data.len() as f64)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        if best.is_none_or(|b| *v > values[b]) {
            best = Some(i);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn local_centering_hand_example() {
        let t = center_targets_local(&[1.0, 3.0], &[2.0, 2.0, 5.0]).unwrap();
        assert_eq!(t, vec![-1.0, 1.0, -1.0, -1.0, 2.0]);
        assert_eq!(center_targets_local(&[4.0; 2], &[4.0; 3]).unwrap(), vec![0.0; 5]);
        assert_eq!(center_targets_local(&[7.5], &[1.0, 2.0]).unwrap()[0], 0.0);
        assert!(matches!(
            center_targets_local(&[], &[1.0]),
            Err(DistillError::EmptySegment("old"))
        ));
        assert!(matches!(
            center_targets_local(&[1.0], &[]),
            Err(DistillError::EmptySegment("new"))
        ));
    }

    #[test]
    fn distill_loss_values() {
        assert_eq!(double_distill_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(double_distill_loss(&[1.0; 5], &[0.0; 5]).unwrap(), 1.0);
        assert_eq!(double_distill_loss(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), 2.5);
        assert_eq!(emd_loss(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), 2.5);
        assert!(matches!(
            double_distill_loss(&[1.0], &[1.0, 2.0]),
            Err(DistillError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn global_centering_examples() {
        let old = [1.0, 3.0];
        let new = [2.0, 2.0, 5.0];
        assert_eq!(
            center_targets_global(&old, &[&new], &[0.7]).unwrap(),
            center_targets_local(&old, &new).unwrap()
        );
        let a = [4.0, 0.0];
        let b = [0.0, 4.0];
        let t = center_targets_global(&old, &[&a, &b], &[1.0, 3.0]).unwrap();
        assert_eq!(t, vec![-1.0, 1.0, -1.0, 1.0]);
        let eq = center_targets_global(&old, &[&a, &b], &[2.0, 2.0]).unwrap();
        assert_eq!(eq[2..], [0.0, 0.0]);
    }

    #[test]
    fn zero_entropy_falls_back_to_uniform() {
        assert_eq!(entropy_weights(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        assert!(matches!(entropy_weights(&[-1.0]), Err(DistillError::InvalidEntropy(_))));
        assert!(matches!(entropy_weights(&[]), Err(DistillError::NoUploads)));
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), Some(1));
        assert_eq!(argmax(&[]), None);
    }

    #[test]
    fn convergence_window() {
        let s = OptimizerSettings {
            convergence_window: 2,
            convergence_threshold: 0.1,
            ..Default::default()
        };
        assert!(!s.converged(&[1.0, 0.5]));
        assert!(!s.converged(&[1.0, 0.5, 0.8]));
        assert!(s.converged(&[1.0, 0.95, 0.95]));
    }
}
