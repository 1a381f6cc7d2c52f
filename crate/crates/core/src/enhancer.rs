//! Enhancer adapters, enhancer groups, the pool and the frozen selector.
//!
//! An enhancer is a residual bottleneck, `x + f(x·W_down + β_down)·W_up + β_up`,
//! so zero up-projection weights and bias give the identity map exactly.
//! A group is `D` enhancers plus a bias-free linear head over its class domain.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::backbone::{BackboneError, EnhancerVars, FrozenBackbone};
use crate::tensor::{activate, Activation, Graph, Tensor, TensorError, Var};

pub type ClassId = u32;
pub type GroupId = u32;

#[derive(Debug, Error)]
pub enum EnhancerError {
    #[error("input width {got} does not match enhancer width {expected}")]
    WidthMismatch { got: usize, expected: usize },
    #[error("bottleneck {bottleneck} must be smaller than width {width}")]
    NotBottleneck { bottleneck: usize, width: usize },
    #[error("enhancer tensor `{name}` has shape {shape:?}, expected {expected:?}")]
    ParamShape {
        name: &'static str,
        shape: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("group {group} has {got} enhancers, backbone depth is {expected}")]
    DepthMismatch {
        group: GroupId,
        got: usize,
        expected: usize,
    },
    #[error("duplicate class {0} in group domain")]
    DuplicateClass(ClassId),
    #[error("head shape {shape:?} does not match width {width} x domain {domain}")]
    HeadShape {
        shape: Vec<usize>,
        width: usize,
        domain: usize,
    },
    #[error("enhancer pool is empty")]
    EmptyPool,
    #[error("selector has no prototypes")]
    NoPrototypes,
    #[error("unknown group {0}")]
    UnknownGroup(GroupId),
    #[error("class {0} is already known")]
    ClassAlreadyKnown(ClassId),
    #[error("class {0} has no samples")]
    NoSamples(ClassId),
    #[error("no new classes given")]
    NoNewClasses,
    #[error("class {class} appears in groups {first} and {second}")]
    OverlappingDomains {
        class: ClassId,
        first: GroupId,
        second: GroupId,
    },
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, EnhancerError>;

/// One bottleneck adapter: `W_down (d×b)`, `β_down (1×b)`, `W_up (b×d)`, `β_up (1×d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnhancerParams {
    pub w_down: Tensor,
    pub b_down: Tensor,
    pub w_up: Tensor,
    pub b_up: Tensor,
    pub activation: Activation,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

impl EnhancerParams {
    pub fn new(
        w_down: Tensor,
        b_down: Tensor,
        w_up: Tensor,
        b_up: Tensor,
        activation: Activation,
    ) -> Result<Self> {
        let (d, b) = match w_down.shape() {
            [d, b] => (*d, *b),
            other => {
                return Err(EnhancerError::ParamShape {
                    name: "w_down",
                    shape: other.to_vec(),
                    expected: vec![0, 0],
                })
            }
        };
        if b >= d {
            return Err(EnhancerError::NotBottleneck {
                bottleneck: b,
                width: d,
            });
        }
        for (name, t, expected) in [
            ("b_down", &b_down, vec![1, b]),
            ("w_up", &w_up, vec![b, d]),
            ("b_up", &b_up, vec![1, d]),
        ] {
            if t.shape() != expected.as_slice() {
                return Err(EnhancerError::ParamShape {
                    name,
                    shape: t.shape().to_vec(),
                    expected,
                });
            }
        }
        Ok(Self {
            w_down,
            b_down,
            w_up,
            b_up,
            activation,
        })
    }

    /// `W_down ~ U(±sqrt(3/d))` from `seed`; `β_down`, `W_up`, `β_up` zero.
    /// The resulting adapter is the identity map.
    pub fn identity_init(width: usize, bottleneck: usize, activation: Activation, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = (3.0 / width as f64).sqrt();
        let w_down = Tensor::matrix(width, bottleneck, uniform(&mut rng, width * bottleneck, bound))
            .expect("shape by construction");
        Self::new(
            w_down,
            Tensor::zeros(&[1, bottleneck]),
            Tensor::zeros(&[bottleneck, width]),
            Tensor::zeros(&[1, width]),
            activation,
        )
        .expect("valid by construction")
    }

    /// Every entry drawn from `U(±scale)`; used for tests and gradient audits.
    pub fn random(width: usize, bottleneck: usize, activation: Activation, seed: u64, scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, b) = (width, bottleneck);
        let mut mk = |r, c| Tensor::matrix(r, c, uniform(&mut rng, r * c, scale)).expect("shape");
        let (wd, bd, wu, bu) = (mk(d, b), mk(1, b), mk(b, d), mk(1, d));
        Self::new(wd, bd, wu, bu, activation).expect("valid by construction")
    }

    pub fn width(&self) -> usize {
        self.w_down.shape()[0]
    }

    pub fn bottleneck(&self) -> usize {
        self.w_down.shape()[1]
    }

    /// `2·d·b + d + b`.
    pub fn parameter_count(&self) -> usize {
        let (d, b) = (self.width(), self.bottleneck());
        2 * d * b + d + b
    }

    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.w_down, &self.b_down, &self.w_up, &self.b_up]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w_down, &mut self.b_down, &mut self.w_up, &mut self.b_up]
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<'a>, trainable: bool) -> EnhancerVars {
        let mut leaf = |t: &'a Tensor| if trainable { g.param(t) } else { g.constant(t) };
        EnhancerVars {
            w_down: leaf(&self.w_down),
            b_down: leaf(&self.b_down),
            w_up: leaf(&self.w_up),
            b_up: leaf(&self.b_up),
            activation: self.activation,
        }
    }
}

/// Applies one enhancer to a single `d`-vector.
pub fn enhancer_forward(x: &[f64], e: &EnhancerParams) -> Result<Vec<f64>> {
    let (d, b) = (e.width(), e.bottleneck());
    if x.len() != d {
        return Err(EnhancerError::WidthMismatch {
            got: x.len(),
            expected: d,
        });
    }
    let wd = e.w_down.data();
    let wu = e.w_up.data();
    let hidden: Vec<f64> = (0..b)
        .map(|j| {
            let z = (0..d).map(|i| x[i] * wd[i * b + j]).sum::<f64>() + e.b_down.data()[j];
            activate(e.activation, z)
        })
        .collect();
    Ok((0..d)
        .map(|i| x[i] + (0..b).map(|j| hidden[j] * wu[j * d + i]).sum::<f64>() + e.b_up.data()[i])
        .collect())
}

/// Graph form of [`enhancer_forward`], row-wise over a `(seq, d)` input.
pub fn enhancer_graph(g: &mut Graph<'_>, x: Var, e: &EnhancerVars) -> std::result::Result<Var, TensorError> {
    let z = g.matmul(x, e.w_down)?;
    let z = g.add(z, e.b_down)?;
    let a = g.activation(z, e.activation);
    let u = g.matmul(a, e.w_up)?;
    let u = g.add(u, e.b_up)?;
    g.add(x, u)
}

/// Graph handles for a bound group, in wire order.
#[derive(Debug, Clone)]
pub struct GroupVars {
    pub enhancers: Vec<EnhancerVars>,
    pub head: Var,
}

impl GroupVars {
    /// Parameter handles in wire order: per enhancer `[W_down, β_down, W_up, β_up]`, then head.
    pub fn ordered(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self
            .enhancers
            .iter()
            .flat_map(|e| [e.w_down, e.b_down, e.w_up, e.b_up])
            .collect();
        out.push(self.head);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnhancerGroup {
    pub group_id: GroupId,
    /// Task that last updated this group.
    pub task_id: u32,
    pub enhancers: Vec<EnhancerParams>,
    /// `d × |domain|`, no bias.
    pub head: Tensor,
    pub domain: Vec<ClassId>,
}

impl EnhancerGroup {
    pub fn new(
        group_id: GroupId,
        task_id: u32,
        enhancers: Vec<EnhancerParams>,
        head: Tensor,
        domain: Vec<ClassId>,
    ) -> Result<Self> {
        let width = enhancers.first().map(|e| e.width()).unwrap_or(head.rows());
        let mut seen = BTreeSet::new();
        for &c in &domain {
            if !seen.insert(c) {
                return Err(EnhancerError::DuplicateClass(c));
            }
        }
        if head.shape() != [width, domain.len()] {
            return Err(EnhancerError::HeadShape {
                shape: head.shape().to_vec(),
                width,
                domain: domain.len(),
            });
        }
        if let Some(e) = enhancers.iter().find(|e| e.width() != width) {
            return Err(EnhancerError::WidthMismatch {
                got: e.width(),
                expected: width,
            });
        }
        Ok(Self {
            group_id,
            task_id,
            enhancers,
            head,
            domain,
        })
    }

    /// Identity enhancers and a zero-column head; seeds derive from `seed`.
    pub fn empty(
        group_id: GroupId,
        depth: usize,
        width: usize,
        bottleneck: usize,
        activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        if bottleneck >= width {
            return Err(EnhancerError::NotBottleneck { bottleneck, width });
        }
        let enhancers = (0..depth)
            .map(|i| EnhancerParams::identity_init(width, bottleneck, activation, seed.wrapping_add(i as u64)))
            .collect();
        Self::new(group_id, 0, enhancers, Tensor::zeros(&[width, 0]), vec![])
    }

    pub fn depth(&self) -> usize {
        self.enhancers.len()
    }

    pub fn width(&self) -> usize {
        self.head.rows()
    }

    pub fn bottleneck(&self) -> usize {
        self.enhancers.first().map(|e| e.bottleneck()).unwrap_or(0)
    }

    /// `D·(2db + d + b) + d·|domain|`.
    pub fn parameter_count(&self) -> usize {
        self.enhancers.iter().map(|e| e.parameter_count()).sum::<usize>() + self.head.len()
    }

    /// Parameter tensors in wire order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.enhancers.iter().flat_map(|e| e.tensors()).collect();
        out.push(&self.head);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self
            .enhancers
            .iter_mut()
            .flat_map(|e| e.tensors_mut())
            .collect();
        out.push(&mut self.head);
        out
    }

    /// All trainable values flattened in wire order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// `θ ← θ − lr·grad` with `grad` flattened in wire order.
    pub fn sgd_step(&mut self, grad: &[f64], lr: f64) {
        debug_assert_eq!(grad.len(), self.parameter_count());
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            for (p, g) in t.data_mut().iter_mut().zip(&grad[offset..offset + n]) {
                *p -= lr * g;
            }
            offset += n;
        }
    }

    pub fn class_index(&self, class: ClassId) -> Option<usize> {
        self.domain.iter().position(|&c| c == class)
    }

    /// Appends zero head columns for `new_classes` (existing columns unchanged).
    pub fn widen_head(&mut self, new_classes: &[ClassId]) -> Result<()> {
        for &c in new_classes {
            if self.domain.contains(&c) {
                return Err(EnhancerError::DuplicateClass(c));
            }
        }
        let d = self.width();
        let (old, add) = (self.domain.len(), new_classes.len());
        let mut data = vec![0.0; d * (old + add)];
        for i in 0..d {
            data[i * (old + add)..i * (old + add) + old].copy_from_slice(self.head.row(i));
        }
        self.head = Tensor::matrix(d, old + add, data)?;
        self.domain.extend_from_slice(new_classes);
        Ok(())
    }

    pub fn check_backbone(&self, backbone: &FrozenBackbone) -> Result<()> {
        if self.depth() != backbone.depth() {
            return Err(EnhancerError::DepthMismatch {
                group: self.group_id,
                got: self.depth(),
                expected: backbone.depth(),
            });
        }
        if self.width() != backbone.width() {
            return Err(EnhancerError::WidthMismatch {
                got: self.width(),
                expected: backbone.width(),
            });
        }
        Ok(())
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<'a>, trainable: bool) -> GroupVars {
        let enhancers = self.enhancers.iter().map(|e| e.bind(g, trainable)).collect();
        let head = if trainable { g.param(&self.head) } else { g.constant(&self.head) };
        GroupVars { enhancers, head }
    }

    /// Builds `pooled_encode(sample; enhancers) · head` into `g`; returns `(1, |domain|)` logits.
    pub fn logits_graph<'a>(
        &'a self,
        g: &mut Graph<'a>,
        backbone: &'a FrozenBackbone,
        vars: &GroupVars,
        sample: &'a Tensor,
    ) -> Result<Var> {
        let x = g.constant(sample);
        let h = backbone.embed_graph(g, x)?;
        let enc = backbone.encode_graph(g, h, Some(&vars.enhancers))?;
        Ok(g.matmul(enc.pooled, vars.head)?)
    }
}

/// Raw logits of `group` for one `(seq, feature_dim)` sample, aligned with `group.domain`.
pub fn group_forward(sample: &Tensor, group: &EnhancerGroup, backbone: &FrozenBackbone) -> Result<Vec<f64>> {
    group.check_backbone(backbone)?;
    let mut g = Graph::new();
    let vars = group.bind(&mut g, false);
    let logits = group.logits_graph(&mut g, backbone, &vars, sample)?;
    Ok(g.value(logits).data().to_vec())
}

/// The `J` groups whose domains partition all learned classes.
#[derive(Debug, Clone, PartialEq)]
pub struct EnhancerPool {
    groups: Vec<EnhancerGroup>,
}

impl EnhancerPool {
    /// `count` empty groups with ids `0..count`.
    pub fn new(
        count: usize,
        depth: usize,
        width: usize,
        bottleneck: usize,
        activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        let groups = (0..count)
            .map(|j| {
                EnhancerGroup::empty(
                    j as GroupId,
                    depth,
                    width,
                    bottleneck,
                    activation,
                    seed.wrapping_add(1000 * j as u64),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { groups })
    }

    pub fn from_groups(groups: Vec<EnhancerGroup>) -> Result<Self> {
        let pool = Self { groups };
        pool.check_disjoint()?;
        Ok(pool)
    }

    pub fn groups(&self) -> &[EnhancerGroup] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn get(&self, id: GroupId) -> Option<&EnhancerGroup> {
        self.groups.iter().find(|g| g.group_id == id)
    }

    pub fn get_mut(&mut self, id: GroupId) -> Option<&mut EnhancerGroup> {
        self.groups.iter_mut().find(|g| g.group_id == id)
    }

    /// Replaces the group with the same id.
    pub fn install(&mut self, group: EnhancerGroup) -> Result<()> {
        let id = group.group_id;
        let slot = self.get_mut(id).ok_or(EnhancerError::UnknownGroup(id))?;
        let previous = std::mem::replace(slot, group);
        if let Err(e) = self.check_disjoint() {
            *self.get_mut(id).expect("present") = previous;
            return Err(e);
        }
        Ok(())
    }

    /// Group whose domain contains `class`.
    pub fn group_of(&self, class: ClassId) -> Option<GroupId> {
        self.groups
            .iter()
            .find(|g| g.domain.contains(&class))
            .map(|g| g.group_id)
    }

    /// `M^A`: union of all group domains.
    pub fn all_classes(&self) -> BTreeSet<ClassId> {
        self.groups.iter().flat_map(|g| g.domain.iter().copied()).collect()
    }

    pub fn check_disjoint(&self) -> Result<()> {
        let mut owner: BTreeMap<ClassId, GroupId> = BTreeMap::new();
        for g in &self.groups {
            for &c in &g.domain {
                if let Some(&first) = owner.get(&c) {
                    return Err(EnhancerError::OverlappingDomains {
                        class: c,
                        first,
                        second: g.group_id,
                    });
                }
                owner.insert(c, g.group_id);
            }
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.groups.iter().map(|g| g.parameter_count()).sum()
    }
}

/// Nearest-prototype router over frozen-backbone embeddings.
///
/// Prototypes and the class→group map change only at task boundaries.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SelectModule {
    prototypes: BTreeMap<ClassId, Vec<f64>>,
    class_to_group: BTreeMap<ClassId, GroupId>,
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mean pooled embedding of a set of samples under the bare backbone.
pub fn mean_embedding(samples: &[&Tensor], backbone: &FrozenBackbone) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; backbone.width()];
    for s in samples {
        for (a, x) in acc.iter_mut().zip(backbone.embed_pooled(s)?) {
            *a += x;
        }
    }
    let n = samples.len().max(1) as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

impl SelectModule {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, class: ClassId, prototype: Vec<f64>, group: GroupId) {
        self.prototypes.insert(class, prototype);
        self.class_to_group.insert(class, group);
    }

    pub fn prototype(&self, class: ClassId) -> Option<&[f64]> {
        self.prototypes.get(&class).map(|p| p.as_slice())
    }

    pub fn group_of(&self, class: ClassId) -> Option<GroupId> {
        self.class_to_group.get(&class).copied()
    }

    pub fn classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.prototypes.keys().copied()
    }

    pub fn classes_of(&self, group: GroupId) -> impl Iterator<Item = ClassId> + '_ {
        self.class_to_group
            .iter()
            .filter(move |(_, &g)| g == group)
            .map(|(&c, _)| c)
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    /// Nearest prototype class by cosine similarity; ties go to the lowest class id.
    pub fn nearest_class(&self, embedding: &[f64]) -> Option<ClassId> {
        let mut best: Option<(ClassId, f64)> = None;
        for (&c, p) in &self.prototypes {
            let s = cosine(embedding, p);
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((c, s));
            }
        }
        best.map(|(c, _)| c)
    }
}

/// Routes a sample to a group through the bare frozen backbone.
pub fn select_group(
    sample: &Tensor,
    pool: &EnhancerPool,
    selector: &SelectModule,
    backbone: &FrozenBackbone,
) -> Result<GroupId> {
    if pool.is_empty() {
        return Err(EnhancerError::EmptyPool);
    }
    if pool.len() == 1 {
        return Ok(pool.groups[0].group_id);
    }
    let emb = backbone.embed_pooled(sample)?;
    let class = selector.nearest_class(&emb).ok_or(EnhancerError::NoPrototypes)?;
    let group = selector.group_of(class).ok_or(EnhancerError::NoPrototypes)?;
    if pool.get(group).is_none() {
        return Err(EnhancerError::UnknownGroup(group));
    }
    Ok(group)
}

/// Chooses the group for a batch of new classes and registers their prototypes.
///
/// The first group with no classes wins outright; otherwise each group is
/// scored by the mean cosine similarity between new-class mean embeddings and
/// its class prototypes, ties going to the lowest group id.
pub fn assign_new_classes(
    new_classes: &[(ClassId, Vec<&Tensor>)],
    pool: &EnhancerPool,
    selector: &mut SelectModule,
    backbone: &FrozenBackbone,
) -> Result<GroupId> {
    if pool.is_empty() {
        return Err(EnhancerError::EmptyPool);
    }
    if new_classes.is_empty() {
        return Err(EnhancerError::NoNewClasses);
    }
    let known = pool.all_classes();
    let mut means = Vec::with_capacity(new_classes.len());
    for (c, samples) in new_classes {
        if known.contains(c) || selector.prototype(*c).is_some() {
            return Err(EnhancerError::ClassAlreadyKnown(*c));
        }
        if samples.is_empty() {
            return Err(EnhancerError::NoSamples(*c));
        }
        means.push((*c, mean_embedding(samples, backbone)?));
    }

    let owned = |g: &EnhancerGroup| -> Vec<ClassId> {
        let mut cs: BTreeSet<ClassId> = g.domain.iter().copied().collect();
        cs.extend(selector.classes_of(g.group_id));
        cs.into_iter().collect()
    };

    let chosen = if let Some(g) = pool.groups.iter().find(|g| owned(g).is_empty()) {
        g.group_id
    } else {
        let mut best: Option<(GroupId, f64)> = None;
        for g in &pool.groups {
            let protos: Vec<&[f64]> = owned(g)
                .into_iter()
                .filter_map(|c| selector.prototype(c))
                .collect();
            let mut total = 0.0;
            for (_, m) in &means {
                for p in &protos {
                    total += cosine(m, p);
                }
            }
            let score = total / (means.len() * protos.len().max(1)) as f64;
            if best.is_none_or(|(_, b)| score > b) {
                best = Some((g.group_id, score));
            }
        }
        best.expect("pool nonempty").0
    };

    for (c, m) in means {
        selector.register(c, m, chosen);
    }
    Ok(chosen)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{build_backbone, BackboneConfig};

    fn cfg() -> BackboneConfig {
        BackboneConfig {
            depth: 2,
            width: 8,
            heads: 2,
            ff_width: 16,
            max_seq_len: 4,
            feature_dim: 3,
            seed: 5,
        }
    }

    fn sample(offset: f64) -> Tensor {
        let data = (0..6).map(|i| ((i as f64) * 0.7 + offset).cos() * 2.0).collect();
        Tensor::new(vec![2, 3], data).unwrap()
    }

    #[test]
    fn zero_up_projection_is_identity() {
        let e = EnhancerParams::identity_init(6, 2, Activation::Gelu, 3);
        let x = [0.3, -1.0, 2.5, 0.0, 7.0, -0.25];
        assert_eq!(enhancer_forward(&x, &e).unwrap(), x.to_vec());
    }

    #[test]
    fn hand_computed_relu_enhancer() {
        let e = EnhancerParams::new(
            Tensor::matrix(2, 1, vec![1.0, 0.0]).unwrap(),
            Tensor::zeros(&[1, 1]),
            Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap(),
            Tensor::zeros(&[1, 2]),
            Activation::Relu,
        )
        .unwrap();
        // z = 2, relu(2) = 2, up = (2, 2), residual (2, 0) + (2, 2)
        assert_eq!(enhancer_forward(&[2.0, 0.0], &e).unwrap(), vec![4.0, 2.0]);
        assert!(matches!(
            enhancer_forward(&[1.0], &e),
            Err(EnhancerError::WidthMismatch { .. })
        ));
    }

    #[test]
    fn parameter_count_for_vit_base_sizes() {
        let e = EnhancerParams::identity_init(768, 64, Activation::Gelu, 0);
        assert_eq!(e.parameter_count(), 99_136);
        assert_eq!(12 * e.parameter_count(), 1_189_632);
    }

    #[test]
    fn bottleneck_must_be_narrower() {
        let err = EnhancerParams::new(
            Tensor::zeros(&[2, 2]),
            Tensor::zeros(&[1, 2]),
            Tensor::zeros(&[2, 2]),
            Tensor::zeros(&[1, 2]),
            Activation::Gelu,
        )
        .unwrap_err();
        assert!(matches!(err, EnhancerError::NotBottleneck { .. }));
    }

    #[test]
    fn graph_and_plain_enhancer_agree() {
        let e = EnhancerParams::random(6, 2, Activation::Gelu, 9, 0.5);
        let x = Tensor::matrix(1, 6, vec![0.1, 0.2, -0.3, 0.4, 1.5, -2.0]).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(&x);
        let vars = e.bind(&mut g, false);
        let y = enhancer_graph(&mut g, xv, &vars).unwrap();
        let plain = enhancer_forward(x.data(), &e).unwrap();
        for (a, b) in g.value(y).data().iter().zip(&plain) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn group_parameter_count_and_domain_checks() {
        let mut g = EnhancerGroup::empty(0, 2, 8, 2, Activation::Gelu, 1).unwrap();
        g.widen_head(&[4, 9, 1]).unwrap();
        assert_eq!(g.parameter_count(), 2 * (2 * 8 * 2 + 8 + 2) + 8 * 3);
        assert!(matches!(g.widen_head(&[9]), Err(EnhancerError::DuplicateClass(9))));
        assert!(matches!(
            EnhancerGroup::new(0, 0, vec![], Tensor::zeros(&[8, 2]), vec![1, 1]),
            Err(EnhancerError::DuplicateClass(1))
        ));
        assert!(matches!(
            EnhancerGroup::new(0, 0, vec![], Tensor::zeros(&[8, 2]), vec![1]),
            Err(EnhancerError::HeadShape { .. })
        ));
    }

    #[test]
    fn widen_head_preserves_existing_columns() {
        let mut g = EnhancerGroup::empty(0, 1, 4, 2, Activation::Gelu, 1).unwrap();
        g.widen_head(&[0]).unwrap();
        g.head = Tensor::matrix(4, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        g.widen_head(&[5, 6]).unwrap();
        assert_eq!(
            g.head.data(),
            &[1.0, 0.0, 0.0, 2.0, 0.0, 0.0, 3.0, 0.0, 0.0, 4.0, 0.0, 0.0]
        );
    }

    #[test]
    fn group_forward_contracts() {
        let bb = build_backbone(cfg()).unwrap();
        let mut g = EnhancerGroup::empty(0, 2, 8, 2, Activation::Gelu, 1).unwrap();
        g.widen_head(&[3, 4, 5]).unwrap();
        let logits = group_forward(&sample(0.0), &g, &bb).unwrap();
        assert_eq!(logits, vec![0.0; 3]);

        let shallow = EnhancerGroup::empty(0, 1, 8, 2, Activation::Gelu, 1).unwrap();
        assert!(matches!(
            group_forward(&sample(0.0), &shallow, &bb),
            Err(EnhancerError::DepthMismatch { .. })
        ));
    }

    #[test]
    fn group_gradients_reach_enhancers_and_head_only() {
        let bb = build_backbone(cfg()).unwrap();
        let mut grp = EnhancerGroup::empty(0, 2, 8, 2, Activation::Gelu, 1).unwrap();
        grp.widen_head(&[0, 1]).unwrap();
        grp.head = Tensor::matrix(8, 2, (0..16).map(|i| i as f64 * 0.01).collect()).unwrap();
        let s = sample(0.4);
        let mut g = Graph::new();
        let vars = grp.bind(&mut g, true);
        let first = g.len();
        let logits = grp.logits_graph(&mut g, &bb, &vars, &s).unwrap();
        let loss = g.cross_entropy(logits, &[1]).unwrap();
        g.backward(loss).unwrap();
        for v in vars.ordered() {
            assert!(g.grad(v).is_some());
        }
        // nodes after the bound group include the sample and backbone constants
        let frozen_with_grad = (first..g.len())
            .map(crate::tensor::Var::from_index)
            .filter(|&v| !g.requires_grad(v) && g.grad(v).is_some())
            .count();
        assert_eq!(frozen_with_grad, 0);
    }

    #[test]
    fn single_group_pool_always_selected() {
        let bb = build_backbone(cfg()).unwrap();
        let pool = EnhancerPool::new(1, 2, 8, 2, Activation::Gelu, 0).unwrap();
        let sel = SelectModule::new();
        assert_eq!(select_group(&sample(0.0), &pool, &sel, &bb).unwrap(), 0);
        let empty = EnhancerPool::from_groups(vec![]).unwrap();
        assert!(matches!(
            select_group(&sample(0.0), &empty, &sel, &bb),
            Err(EnhancerError::EmptyPool)
        ));
    }

    #[test]
    fn sample_equal_to_prototype_routes_to_its_group() {
        let bb = build_backbone(cfg()).unwrap();
        let pool = EnhancerPool::new(3, 2, 8, 2, Activation::Gelu, 0).unwrap();
        let mut sel = SelectModule::new();
        let exemplars: Vec<Tensor> = (0..3).map(|i| sample(i as f64 * 1.9)).collect();
        for (i, e) in exemplars.iter().enumerate() {
            sel.register(i as ClassId * 10, bb.embed_pooled(e).unwrap(), i as GroupId);
        }
        assert_eq!(select_group(&exemplars[2], &pool, &sel, &bb).unwrap(), 2);
        assert_eq!(select_group(&exemplars[2], &pool, &sel, &bb).unwrap(), 2);
    }

    #[test]
    fn equidistant_prototypes_break_ties_by_lowest_class() {
        let bb = build_backbone(cfg()).unwrap();
        let pool = EnhancerPool::new(2, 2, 8, 2, Activation::Gelu, 0).unwrap();
        let mut sel = SelectModule::new();
        let p = bb.embed_pooled(&sample(0.0)).unwrap();
        sel.register(7, p.clone(), 1);
        sel.register(3, p, 0);
        assert_eq!(select_group(&sample(0.0), &pool, &sel, &bb).unwrap(), 0);
        assert_eq!(sel.nearest_class(&[1.0; 8]), Some(3));
    }

    #[test]
    fn assignment_prefers_first_empty_group() {
        let bb = build_backbone(cfg()).unwrap();
        let pool = EnhancerPool::new(3, 2, 8, 2, Activation::Gelu, 0).unwrap();
        let mut sel = SelectModule::new();
        let s = sample(0.0);
        let g = assign_new_classes(&[(0, vec![&s])], &pool, &mut sel, &bb).unwrap();
        assert_eq!(g, 0);
        let s1 = sample(2.0);
        let g = assign_new_classes(&[(1, vec![&s1])], &pool, &mut sel, &bb).unwrap();
        assert_eq!(g, 1);
        assert!(matches!(
            assign_new_classes(&[(1, vec![&s1])], &pool, &mut sel, &bb),
            Err(EnhancerError::ClassAlreadyKnown(1))
        ));
        assert!(matches!(
            assign_new_classes(&[], &pool, &mut sel, &bb),
            Err(EnhancerError::NoNewClasses)
        ));
    }

    #[test]
    fn assignment_follows_exact_prototype_copy() {
        let bb = build_backbone(cfg()).unwrap();
        let pool = EnhancerPool::new(2, 2, 8, 2, Activation::Gelu, 0).unwrap();
        let mut sel = SelectModule::new();
        let (a, b) = (sample(0.0), sample(2.5));
        sel.register(0, bb.embed_pooled(&a).unwrap(), 0);
        sel.register(1, bb.embed_pooled(&b).unwrap(), 1);
        let g = assign_new_classes(&[(5, vec![&b])], &pool, &mut sel, &bb).unwrap();
        assert_eq!(g, 1);
        assert_eq!(sel.group_of(5), Some(1));
    }

    #[test]
    fn pool_install_rejects_overlap() {
        let mut pool = EnhancerPool::new(2, 1, 4, 2, Activation::Gelu, 0).unwrap();
        let mut g0 = pool.get(0).unwrap().clone();
        g0.widen_head(&[1, 2]).unwrap();
        pool.install(g0).unwrap();
        let mut g1 = pool.get(1).unwrap().clone();
        g1.widen_head(&[2]).unwrap();
        assert!(matches!(
            pool.install(g1),
            Err(EnhancerError::OverlappingDomains { class: 2, .. })
        ));
        assert!(pool.get(1).unwrap().domain.is_empty());
        assert_eq!(pool.group_of(1), Some(0));
    }
}
