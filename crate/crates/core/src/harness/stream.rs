//! Synthetic class-incremental stream.
//!
//! Class `c` owns a center `μ_c ~ N(0, separation²·I)` in feature space. A
//! sample draws a latent `z ~ N(μ_c, spread²·I)` and emits `seq_len` tokens
//! `z + N(0, token_noise²·I)`. Every draw comes from a seed derived from the
//! master seed and the draw's role, so any part of the stream can be rebuilt
//! on its own.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};

use crate::enhancer::ClassId;
use crate::federation::{derive_seed, ClientTask};
use crate::harness::config::ExperimentConfig;
use crate::harness::HarnessError;
use crate::memory::{largest_remainder, LabelDistribution, LabeledSample, PublicPool};
use crate::tensor::Tensor;

const CENTER: u64 = 1;
const TRAIN: u64 = 2;
const VALIDATION: u64 = 3;
const PUBLIC: u64 = 4;
const VISIBLE: u64 = 5;
const PROPORTION: u64 = 6;

#[derive(Debug, Clone)]
pub struct ClassGenerator {
    centers: Vec<Vec<f64>>,
    spread: f64,
    token_noise: f64,
    seq_len: usize,
}

impl ClassGenerator {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        let f = cfg.backbone.feature_dim;
        let sep = Normal::new(0.0, cfg.stream.separation.max(f64::MIN_POSITIVE)).expect("validated");
        let centers = (0..cfg.stream.class_budget)
            .map(|c| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[CENTER, c as u64]));
                (0..f).map(|_| sep.sample(&mut rng)).collect()
            })
            .collect();
        Self {
            centers,
            spread: cfg.stream.spread,
            token_noise: cfg.stream.token_noise,
            seq_len: cfg.stream.seq_len,
        }
    }

    pub fn center(&self, class: ClassId) -> &[f64] {
        &self.centers[class as usize]
    }

    pub fn sample(&self, class: ClassId, rng: &mut ChaCha8Rng) -> Tensor {
        let mu = self.center(class);
        let f = mu.len();
        let spread = Normal::new(0.0, self.spread.max(f64::MIN_POSITIVE)).expect("validated");
        let noise = Normal::new(0.0, self.token_noise.max(f64::MIN_POSITIVE)).expect("validated");
        let z: Vec<f64> = mu
            .iter()
            .map(|m| if self.spread > 0.0 { m + spread.sample(rng) } else { *m })
            .collect();
        let mut data = Vec::with_capacity(self.seq_len * f);
        for _ in 0..self.seq_len {
            data.extend(z.iter().map(|x| if self.token_noise > 0.0 { x + noise.sample(rng) } else { *x }));
        }
        Tensor::matrix(self.seq_len, f, data).expect("shape by construction")
    }

    pub fn draw(&self, class: ClassId, count: usize, seed: u64) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(|_| self.sample(class, &mut rng)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub task_id: u32,
    pub classes: Vec<ClassId>,
    /// Indexed by client id; every client gets a shard, selection happens per round.
    pub shards: Vec<ClientTask>,
}

#[derive(Debug, Clone)]
pub struct SyntheticStream {
    pub tasks: Vec<TaskSpec>,
    /// Balanced held-out samples, by task.
    pub validation: Vec<Vec<LabeledSample>>,
    pub public: PublicPool,
}

impl SyntheticStream {
    /// `M^A` after the first `tasks` tasks.
    pub fn classes_through(&self, tasks: usize) -> Vec<ClassId> {
        self.tasks.iter().take(tasks).flat_map(|t| t.classes.iter().copied()).collect()
    }
}

/// Number of a task's classes each client sees.
pub fn visible_count(visibility: f64, classes: usize) -> usize {
    ((visibility * classes as f64 + 1e-9).floor() as usize).clamp(1, classes)
}

/// `Dirichlet(α)` over `n` entries via normalized Gamma draws.
fn dirichlet(alpha: f64, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated");
    let mut w: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = w.iter().sum();
    if sum > 0.0 {
        w.iter_mut().for_each(|x| *x /= sum);
    } else {
        w = vec![1.0 / n as f64; n];
    }
    w
}

pub fn generate_stream(cfg: &ExperimentConfig) -> Result<SyntheticStream, HarnessError> {
    cfg.validate()?;
    let s = &cfg.stream;
    let generator = ClassGenerator::new(cfg);
    let mut tasks = Vec::with_capacity(s.tasks);
    let mut validation = Vec::with_capacity(s.tasks);
    let mut public = PublicPool::new();
    for t in 0..s.tasks {
        let classes: Vec<ClassId> = (0..s.classes_per_task).map(|i| (t * s.classes_per_task + i) as ClassId).collect();
        let mut val = Vec::new();
        for &c in &classes {
            let vs = generator.draw(c, s.val_per_class, derive_seed(cfg.seed, &[VALIDATION, u64::from(c)]));
            val.extend(vs.into_iter().map(|x| LabeledSample::new(x, c)));
            public.insert(c, generator.draw(c, s.public_per_class, derive_seed(cfg.seed, &[PUBLIC, u64::from(c)])));
        }
        let shards = (0..cfg.federation.clients)
            .map(|k| {
                let key = [t as u64, k as u64];
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[VISIBLE, key[0], key[1]]));
                let mut visible = classes.clone();
                visible.shuffle(&mut rng);
                visible.truncate(visible_count(s.visibility, classes.len()));
                visible.sort_unstable();
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[PROPORTION, key[0], key[1]]));
                let weights = dirichlet(s.dirichlet_alpha, visible.len(), &mut rng);
                let dist = LabelDistribution::new(visible.iter().copied().zip(weights).collect())
                    .or_else(|_| LabelDistribution::from_counts(visible.iter().map(|&c| (c, 1))))
                    .map_err(|e| HarnessError::Stream(e.to_string()))?;
                let counts = largest_remainder(&dist, s.samples_per_client);
                let mut samples = Vec::with_capacity(s.samples_per_client);
                for (&c, &n) in &counts {
                    let seed = derive_seed(cfg.seed, &[TRAIN, key[0], key[1], u64::from(c)]);
                    samples.extend(generator.draw(c, n, seed).into_iter().map(|x| LabeledSample::new(x, c)));
                }
                Ok(ClientTask {
                    task_id: t as u32,
                    new_classes: classes.clone(),
                    samples,
                })
            })
            .collect::<Result<Vec<_>, HarnessError>>()?;
        tasks.push(TaskSpec {
            task_id: t as u32,
            classes,
            shards,
        });
        validation.push(val);
    }
    Ok(SyntheticStream {
        tasks,
        validation,
        public,
    })
}
