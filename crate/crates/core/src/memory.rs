//! Client exemplar memory, augmented distillation sets, label distributions
//! and server-side auxiliary datasets.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{BackboneError, FrozenBackbone};
use crate::enhancer::ClassId;
use crate::parallel;
use crate::tensor::Tensor;

/// Tolerance on `Σ p = 1` for a label distribution.
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("memory capacity must be at least 1")]
    ZeroCapacity,
    #[error("store ratio {0} outside (0, 1]")]
    StoreRatio(f64),
    #[error("capacity {capacity} cannot hold one exemplar for each of {classes} classes")]
    CapacityExceeded { capacity: usize, classes: usize },
    #[error("no exemplar stored for class {0}")]
    MissingExemplar(ClassId),
    #[error("class {0} has positive probability but no public samples")]
    MissingPublicClass(ClassId),
    #[error("invalid label distribution: {0}")]
    InvalidDistribution(String),
    #[error("augmentation sigma {0} must be finite and non-negative")]
    Sigma(f64),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
}

pub type Result<T> = std::result::Result<T, MemoryError>;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub sample: Tensor,
    pub label: ClassId,
}

impl LabeledSample {
    pub fn new(sample: Tensor, label: ClassId) -> Self {
        Self { sample, label }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Exemplar {
    sample: Tensor,
    /// Distance of its embedding to the class-mean embedding.
    distance: f64,
}

/// Bounded per-class exemplar store.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMemory {
    capacity: usize,
    store_ratio: f64,
    exemplars: BTreeMap<ClassId, Vec<Exemplar>>,
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

impl SampleMemory {
    pub fn new(capacity: usize, store_ratio: f64) -> Result<Self> {
        if capacity == 0 {
            return Err(MemoryError::ZeroCapacity);
        }
        if !(store_ratio > 0.0 && store_ratio <= 1.0) {
            return Err(MemoryError::StoreRatio(store_ratio));
        }
        Ok(Self {
            capacity,
            store_ratio,
            exemplars: BTreeMap::new(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.exemplars.values().map(|v| v.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.exemplars.is_empty()
    }

    pub fn classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.exemplars.keys().copied()
    }

    pub fn contains(&self, class: ClassId) -> bool {
        self.exemplars.contains_key(&class)
    }

    /// `floor(|S| / |M^A|)` with a floor of one.
    pub fn quota(&self) -> usize {
        (self.capacity / self.exemplars.len().max(1)).max(1)
    }

    pub fn exemplars(&self, class: ClassId) -> Option<Vec<&Tensor>> {
        self.exemplars
            .get(&class)
            .map(|v| v.iter().map(|e| &e.sample).collect())
    }

    /// Stores the most class-typical samples of every class not yet in
    /// memory, then trims every class to the re-evaluated quota, dropping
    /// the farthest-from-mean exemplars first.
    pub fn store_exemplars(&mut self, samples: &[LabeledSample], backbone: &FrozenBackbone) -> Result<()> {
        let mut by_class: BTreeMap<ClassId, Vec<&Tensor>> = BTreeMap::new();
        for s in samples {
            if !self.exemplars.contains_key(&s.label) {
                by_class.entry(s.label).or_default().push(&s.sample);
            }
        }
        if by_class.is_empty() {
            return Ok(());
        }
        let classes = self.exemplars.len() + by_class.len();
        if classes > self.capacity {
            return Err(MemoryError::CapacityExceeded {
                capacity: self.capacity,
                classes,
            });
        }
        let quota = (self.capacity / classes).max(1);

        for (class, items) in by_class {
            let embeddings = parallel::map(&items, |s| backbone.embed_pooled(s));
            let embeddings = embeddings.into_iter().collect::<std::result::Result<Vec<_>, _>>()?;
            let d = embeddings[0].len();
            let mut mean = vec![0.0; d];
            for e in &embeddings {
                mean.iter_mut().zip(e).for_each(|(m, x)| *m += x);
            }
            mean.iter_mut().for_each(|m| *m /= embeddings.len() as f64);
            let mut ranked: Vec<Exemplar> = items
                .iter()
                .zip(&embeddings)
                .map(|(s, e)| Exemplar {
                    sample: (*s).clone(),
                    distance: euclidean(e, &mean),
                })
                .collect();
            ranked.sort_by(|a, b| a.distance.total_cmp(&b.distance));
            let eligible = ((self.store_ratio * items.len() as f64).floor() as usize).max(1);
            ranked.truncate(eligible.min(quota));
            self.exemplars.insert(class, ranked);
        }
        for list in self.exemplars.values_mut() {
            list.truncate(quota);
        }
        Ok(())
    }
}

/// Builds `size` augmented copies of stored exemplars, balanced across
/// `classes` (counts differ by at most one, earlier classes get the extra).
/// Each copy adds `N(0, sigma²)` noise to every feature; the set is shuffled.
pub fn build_distill_set(
    classes: &[ClassId],
    size: usize,
    memory: &SampleMemory,
    seed: u64,
    sigma: f64,
) -> Result<Vec<LabeledSample>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(MemoryError::Sigma(sigma));
    }
    let pools: Vec<(ClassId, Vec<&Tensor>)> = classes
        .iter()
        .map(|&c| {
            memory
                .exemplars(c)
                .filter(|v| !v.is_empty())
                .map(|v| (c, v))
                .ok_or(MemoryError::MissingExemplar(c))
        })
        .collect::<Result<_>>()?;
    if pools.is_empty() {
        return Ok(vec![]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).expect("sigma validated");
    let (base, extra) = (size / pools.len(), size % pools.len());
    let mut out = Vec::with_capacity(size);
    for (i, (class, ex)) in pools.iter().enumerate() {
        let count = base + usize::from(i < extra);
        for k in 0..count {
            let src = ex[k % ex.len()];
            let sample = if sigma == 0.0 {
                src.clone()
            } else {
                let data = src.data().iter().map(|x| x + noise.sample(&mut rng)).collect();
                Tensor::new(src.shape().to_vec(), data).expect("same shape")
            };
            out.push(LabeledSample::new(sample, *class));
        }
    }
    out.shuffle(&mut rng);
    Ok(out)
}

/// Class probabilities `P_y`, non-negative and summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelDistribution(BTreeMap<ClassId, f64>);

impl LabelDistribution {
    pub fn new(probs: BTreeMap<ClassId, f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(MemoryError::InvalidDistribution("empty".into()));
        }
        if let Some((c, p)) = probs.iter().find(|(_, p)| !(p.is_finite() && **p >= 0.0)) {
            return Err(MemoryError::InvalidDistribution(format!(
                "class {c} has probability {p}"
            )));
        }
        let sum: f64 = probs.values().sum();
        if (sum - 1.0).abs() > DISTRIBUTION_TOLERANCE {
            return Err(MemoryError::InvalidDistribution(format!("sums to {sum}")));
        }
        Ok(Self(probs))
    }

    pub fn from_counts<I: IntoIterator<Item = (ClassId, usize)>>(counts: I) -> Result<Self> {
        let counts: BTreeMap<ClassId, usize> = counts.into_iter().fold(BTreeMap::new(), |mut m, (c, n)| {
            *m.entry(c).or_insert(0) += n;
            m
        });
        let total: usize = counts.values().sum();
        if total == 0 {
            return Err(MemoryError::InvalidDistribution("no samples".into()));
        }
        Self::new(
            counts
                .into_iter()
                .map(|(c, n)| (c, n as f64 / total as f64))
                .collect(),
        )
    }

    /// Element-wise mean of several distributions over the union of their
    /// supports, renormalized.
    pub fn mean_of(dists: &[&LabelDistribution]) -> Result<Self> {
        let mut acc: BTreeMap<ClassId, f64> = BTreeMap::new();
        for d in dists {
            for (&c, &p) in &d.0 {
                *acc.entry(c).or_insert(0.0) += p;
            }
        }
        let total: f64 = acc.values().sum();
        if total <= 0.0 {
            return Err(MemoryError::InvalidDistribution("empty mixture".into()));
        }
        acc.values_mut().for_each(|p| *p /= total);
        Self::new(acc)
    }

    pub fn probabilities(&self) -> &BTreeMap<ClassId, f64> {
        &self.0
    }

    pub fn get(&self, class: ClassId) -> f64 {
        self.0.get(&class).copied().unwrap_or(0.0)
    }
}

/// Shannon entropy in nats, with `0·ln 0 = 0`.
pub fn entropy(dist: &LabelDistribution) -> f64 {
    let h: f64 = dist
        .0
        .values()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    h.max(0.0)
}

/// Per-class counts summing exactly to `size`: floors of `size·p`, with the
/// leftover handed out by largest fractional part (ties to the lowest class id).
pub fn largest_remainder(dist: &LabelDistribution, size: usize) -> BTreeMap<ClassId, usize> {
    let mut counts = BTreeMap::new();
    let mut fracs = Vec::new();
    let mut assigned = 0usize;
    for (&c, &p) in &dist.0 {
        let exact = p * size as f64;
        let floor = exact.floor() as usize;
        counts.insert(c, floor);
        assigned += floor;
        fracs.push((c, exact - floor as f64));
    }
    fracs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    for (c, _) in fracs.into_iter().take(size.saturating_sub(assigned)) {
        *counts.get_mut(&c).expect("present") += 1;
    }
    counts
}

/// Server-held samples of a similar domain, by class.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PublicPool {
    samples: BTreeMap<ClassId, Vec<Tensor>>,
}

impl PublicPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, class: ClassId, samples: Vec<Tensor>) {
        self.samples.entry(class).or_default().extend(samples);
    }

    pub fn get(&self, class: ClassId) -> Option<&[Tensor]> {
        self.samples.get(&class).map(|v| v.as_slice())
    }

    pub fn classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.samples.keys().copied()
    }
}

/// Mini-batch view over a draw plan from a [`PublicPool`]. Only indices are
/// held; samples are copied out one batch at a time.
#[derive(Debug, Clone)]
pub struct AuxiliaryDataset<'a> {
    pool: &'a PublicPool,
    plan: Vec<(ClassId, usize)>,
    batch_size: usize,
    cursor: usize,
}

/// Draws `size` samples from `pool` with per-class counts given by
/// [`largest_remainder`] of `dist`.
pub fn build_auxiliary<'a>(
    dist: &LabelDistribution,
    pool: &'a PublicPool,
    size: usize,
    batch_size: usize,
    seed: u64,
) -> Result<AuxiliaryDataset<'a>> {
    let counts = largest_remainder(dist, size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut plan = Vec::with_capacity(size);
    for (&c, &n) in &counts {
        if dist.get(c) <= 0.0 {
            continue;
        }
        let avail = pool
            .get(c)
            .filter(|s| !s.is_empty())
            .ok_or(MemoryError::MissingPublicClass(c))?
            .len();
        for _ in 0..n {
            plan.push((c, rng.random_range(0..avail)));
        }
    }
    plan.shuffle(&mut rng);
    Ok(AuxiliaryDataset {
        pool,
        plan,
        batch_size: batch_size.max(1),
        cursor: 0,
    })
}

impl AuxiliaryDataset<'_> {
    pub fn len(&self) -> usize {
        self.plan.len()
    }

    pub fn is_empty(&self) -> bool {
        self.plan.is_empty()
    }

    pub fn class_counts(&self) -> BTreeMap<ClassId, usize> {
        let mut m = BTreeMap::new();
        for (c, _) in &self.plan {
            *m.entry(*c).or_insert(0) += 1;
        }
        m
    }

    /// Restarts iteration from the first batch.
    pub fn rewind(&mut self) {
        self.cursor = 0;
    }
}

impl Iterator for AuxiliaryDataset<'_> {
    type Item = Vec<LabeledSample>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.plan.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.plan.len());
        let batch = self.plan[self.cursor..end]
            .iter()
            .map(|&(c, i)| LabeledSample::new(self.pool.samples[&c][i].clone(), c))
            .collect();
        self.cursor = end;
        Some(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{build_backbone, BackboneConfig};

    fn bb() -> FrozenBackbone {
        build_backbone(BackboneConfig {
            depth: 1,
            width: 8,
            heads: 2,
            ff_width: 8,
            max_seq_len: 2,
            feature_dim: 2,
            seed: 3,
        })
        .unwrap()
    }

    fn s(v: f64) -> Tensor {
        Tensor::new(vec![2, 2], vec![v, -v, 0.5 * v, 1.0]).unwrap()
    }

    fn dist(pairs: &[(ClassId, f64)]) -> LabelDistribution {
        LabelDistribution::new(pairs.iter().copied().collect()).unwrap()
    }

    #[test]
    fn construction_rejects_zero_capacity() {
        assert!(matches!(SampleMemory::new(0, 0.5), Err(MemoryError::ZeroCapacity)));
        assert!(matches!(SampleMemory::new(4, 0.0), Err(MemoryError::StoreRatio(_))));
    }

    #[test]
    fn single_sample_is_stored() {
        let mut m = SampleMemory::new(4, 0.1).unwrap();
        m.store_exemplars(&[LabeledSample::new(s(1.0), 3)], &bb()).unwrap();
        assert_eq!(m.exemplars(3).unwrap(), vec![&s(1.0)]);
    }

    #[test]
    fn quota_shrinks_to_one_per_class() {
        let backbone = bb();
        let mut m = SampleMemory::new(4, 1.0).unwrap();
        let first: Vec<_> = (0..4).map(|i| LabeledSample::new(s(i as f64), 0)).collect();
        m.store_exemplars(&first, &backbone).unwrap();
        assert_eq!(m.len(), 4);
        let rest: Vec<_> = (1..4)
            .flat_map(|c| (0..3).map(move |i| LabeledSample::new(s(c as f64 * 10.0 + i as f64), c)))
            .collect();
        m.store_exemplars(&rest, &backbone).unwrap();
        assert_eq!(m.len(), 4);
        for c in 0..4 {
            assert_eq!(m.exemplars(c).unwrap().len(), 1);
        }
        let err = m
            .store_exemplars(&[LabeledSample::new(s(0.0), 9)], &backbone)
            .unwrap_err();
        assert!(matches!(err, MemoryError::CapacityExceeded { .. }));
    }

    #[test]
    fn distill_set_is_balanced_and_deterministic() {
        let backbone = bb();
        let mut m = SampleMemory::new(8, 1.0).unwrap();
        m.store_exemplars(
            &[LabeledSample::new(s(1.0), 0), LabeledSample::new(s(2.0), 1)],
            &backbone,
        )
        .unwrap();
        let u = build_distill_set(&[0, 1], 4, &m, 7, 0.1).unwrap();
        assert_eq!(u.iter().filter(|x| x.label == 0).count(), 2);
        assert_eq!(u, build_distill_set(&[0, 1], 4, &m, 7, 0.1).unwrap());

        let exact = build_distill_set(&[0, 1], 5, &m, 7, 0.0).unwrap();
        for x in &exact {
            assert_eq!(&x.sample, m.exemplars(x.label).unwrap()[0]);
        }
        assert_eq!(exact.iter().filter(|x| x.label == 0).count(), 3);

        assert!(matches!(
            build_distill_set(&[0, 5], 4, &m, 7, 0.1),
            Err(MemoryError::MissingExemplar(5))
        ));
    }

    #[test]
    fn entropy_values() {
        let u4 = dist(&[(0, 0.25), (1, 0.25), (2, 0.25), (3, 0.25)]);
        assert!((entropy(&u4) - 4f64.ln()).abs() < 1e-12);
        assert_eq!(entropy(&dist(&[(5, 1.0)])), 0.0);
        assert_eq!(entropy(&dist(&[(0, 1.0), (1, 0.0)])), 0.0);
        // −(0.5 ln 0.5 + 2·0.25 ln 0.25) = 1.5 ln 2
        let h = entropy(&dist(&[(0, 0.5), (1, 0.25), (2, 0.25)]));
        assert!((h - 1.039_720_770_839_917_9).abs() < 1e-12);
    }

    #[test]
    fn invalid_distribution_rejected() {
        let bad: BTreeMap<ClassId, f64> = [(0, 0.5), (1, 0.4)].into_iter().collect();
        assert!(LabelDistribution::new(bad).is_err());
        let neg: BTreeMap<ClassId, f64> = [(0, 1.5), (1, -0.5)].into_iter().collect();
        assert!(LabelDistribution::new(neg).is_err());
    }

    #[test]
    fn largest_remainder_counts() {
        let two = dist(&[(0, 0.5), (1, 0.5)]);
        assert_eq!(largest_remainder(&two, 10).values().copied().collect::<Vec<_>>(), vec![5, 5]);
        let three = dist(&[(0, 0.5), (1, 0.25), (2, 0.25)]);
        assert_eq!(
            largest_remainder(&three, 8).values().copied().collect::<Vec<_>>(),
            vec![4, 2, 2]
        );
        // 7·(1/3) each → floors 2,2,2, one leftover to class 0
        let thirds = dist(&[(0, 1.0 / 3.0), (1, 1.0 / 3.0), (2, 1.0 - 2.0 / 3.0)]);
        assert_eq!(largest_remainder(&thirds, 7).values().sum::<usize>(), 7);
    }

    #[test]
    fn auxiliary_dataset_batches() {
        let mut pool = PublicPool::new();
        pool.insert(0, vec![s(1.0), s(2.0)]);
        pool.insert(1, vec![s(3.0)]);
        let d = dist(&[(0, 0.5), (1, 0.5)]);
        let aux = build_auxiliary(&d, &pool, 10, 4, 1).unwrap();
        assert_eq!(aux.class_counts().values().copied().collect::<Vec<_>>(), vec![5, 5]);
        let sizes: Vec<usize> = aux.map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);

        let mut empty = build_auxiliary(&d, &pool, 0, 4, 1).unwrap();
        assert!(empty.next().is_none());

        let missing = dist(&[(0, 0.5), (7, 0.5)]);
        assert!(matches!(
            build_auxiliary(&missing, &pool, 4, 4, 1),
            Err(MemoryError::MissingPublicClass(7))
        ));
    }

    #[test]
    fn mean_of_distributions_renormalizes() {
        let a = dist(&[(0, 1.0)]);
        let b = dist(&[(0, 0.5), (1, 0.5)]);
        let m = LabelDistribution::mean_of(&[&a, &b]).unwrap();
        assert!((m.get(0) - 0.75).abs() < 1e-15);
        assert!((m.get(1) - 0.25).abs() < 1e-15);
    }
}
