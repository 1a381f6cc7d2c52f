//! End-to-end runs: FedET and the naive fine-tune baseline share one pipeline
//! and differ only in the client algorithm and the server aggregation.

use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{build_backbone, FrozenBackbone};
use crate::distill::{argmax, ConsolidationSpec};
use crate::enhancer::{group_forward, select_group, EnhancerError, EnhancerPool, SelectModule};
use crate::federation::{
    derive_seed, Aggregation, ClientAlgorithm, ClientSettings, ClientState, CostTable, Federation, ServerSettings,
    ServerState,
};
use crate::harness::config::ExperimentConfig;
use crate::harness::report::{MetricsReport, RoundBytes};
use crate::harness::stream::generate_stream;
use crate::harness::HarnessError;
use crate::memory::{LabeledSample, SampleMemory};
use crate::parallel;

const POOL: u64 = 11;
const SERVER: u64 = 12;
const CLIENT: u64 = 13;
const SELECT: u64 = 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Fedet,
    Finetune,
}

impl Algorithm {
    fn parts(self) -> (ClientAlgorithm, Aggregation) {
        match self {
            Algorithm::Fedet => (ClientAlgorithm::Incremental, Aggregation::Distill),
            Algorithm::Finetune => (ClientAlgorithm::Finetune, Aggregation::Average),
        }
    }
}

/// Fraction of `samples` classified correctly by routing through the selector
/// and taking the argmax over the selected group's domain.
pub fn evaluate(
    pool: &EnhancerPool,
    selector: &SelectModule,
    backbone: &FrozenBackbone,
    samples: &[LabeledSample],
) -> Result<f64, EnhancerError> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let hits = parallel::map(samples, |s| -> Result<bool, EnhancerError> {
        let gid = select_group(&s.sample, pool, selector, backbone)?;
        let group = pool.get(gid).ok_or(EnhancerError::UnknownGroup(gid))?;
        if group.domain.is_empty() {
            return Ok(false);
        }
        let logits = group_forward(&s.sample, group, backbone)?;
        Ok(argmax(&logits).map(|i| group.domain[i]) == Some(s.label))
    });
    let mut n = 0usize;
    for h in hits {
        n += usize::from(h?);
    }
    Ok(n as f64 / samples.len() as f64)
}

fn round_err(round: usize) -> impl Fn(Box<dyn std::error::Error + Send + Sync>) -> HarnessError {
    move |source| HarnessError::Round { round, source }
}

pub fn run_fedet(cfg: &ExperimentConfig) -> Result<MetricsReport, HarnessError> {
    run_experiment(cfg, Algorithm::Fedet)
}

pub fn run_finetune_baseline(cfg: &ExperimentConfig) -> Result<MetricsReport, HarnessError> {
    run_experiment(cfg, Algorithm::Finetune)
}

pub fn run_experiment(cfg: &ExperimentConfig, algorithm: Algorithm) -> Result<MetricsReport, HarnessError> {
    let started = Instant::now();
    cfg.validate()?;
    let backbone = build_backbone(cfg.backbone.clone()).map_err(|e| HarnessError::Config {
        field: "backbone",
        reason: e.to_string(),
    })?;
    let stream = generate_stream(cfg)?;
    let (client_alg, aggregation) = algorithm.parts();
    let (depth, width, b) = (cfg.backbone.depth, cfg.backbone.width, cfg.pool.bottleneck);
    let act = cfg.pool.activation;

    let pool = EnhancerPool::new(cfg.pool.groups, depth, width, b, act, derive_seed(cfg.seed, &[POOL]))
        .map_err(|e| HarnessError::Config {
            field: "pool",
            reason: e.to_string(),
        })?;
    let server = ServerState::new(
        pool.clone(),
        stream.public.clone(),
        ServerSettings {
            window: cfg.federation.window,
            aux_size: cfg.train.aux_size,
            aux_batch: cfg.train.aux_batch,
            global: ConsolidationSpec {
                optimizer: cfg.train.global.clone(),
                require_full_coverage: false,
            },
            seed: derive_seed(cfg.seed, &[SERVER]),
            activation: act,
        },
        aggregation,
    );
    let clients = (0..cfg.federation.clients)
        .map(|k| {
            let memory = SampleMemory::new(cfg.memory.capacity, cfg.memory.store_ratio).map_err(|e| {
                HarnessError::Config {
                    field: "memory",
                    reason: e.to_string(),
                }
            })?;
            Ok(ClientState::new(k as u32, pool.clone(), server.selector.clone(), memory))
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    let settings = ClientSettings {
        bottleneck: b,
        activation: act,
        temp: cfg.train.temp.clone(),
        local: cfg.train.local.clone(),
        distill_size: cfg.memory.distill_size,
        augment_sigma: cfg.memory.augment_sigma,
        seed: derive_seed(cfg.seed, &[CLIENT]),
    };
    let mut fed = Federation::new(server, clients, cfg.mode);

    let mut accuracy = Vec::with_capacity(cfg.rounds);
    let mut pre_task = Vec::with_capacity(cfg.rounds);
    let mut rounds = Vec::with_capacity(cfg.rounds);
    for r in 0..cfg.rounds {
        let task = &stream.tasks[r];
        let err = round_err(r);
        let tick = fed.tick;
        fed.server
            .log
            .push(tick, "task", None, None, 0, format!("task={} classes={:?}", task.task_id, task.classes));
        fed.server
            .declare_classes(tick, &task.classes, &backbone)
            .map_err(|e| err(Box::new(e)))?;
        pre_task.push(
            evaluate(&fed.server.pool, &fed.server.selector, &backbone, &stream.validation[r])
                .map_err(|e| err(Box::new(e)))?,
        );

        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[SELECT, r as u64]));
        let mut selected = sample(&mut rng, cfg.federation.clients, cfg.federation.clients_per_round).into_vec();
        selected.sort_unstable();
        for &k in &selected {
            fed.server.log.push(tick, "select", Some(k as u32), None, 0, format!("round={r}"));
        }
        let tasks = selected.iter().map(|&k| (k, task.shards[k].clone())).collect();
        let stats = fed
            .run_round(tasks, &backbone, &settings, client_alg)
            .map_err(|e| err(Box::new(e)))?;

        let row = (0..=r)
            .map(|j| evaluate(&fed.server.pool, &fed.server.selector, &backbone, &stream.validation[j]))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| err(Box::new(e)))?;
        let tick = fed.tick.saturating_sub(1);
        let shown: Vec<String> = row.iter().map(|a| format!("{a:.4}")).collect();
        fed.server
            .log
            .push(tick, "evaluate", None, None, 0, format!("after_task={r} accuracy=[{}]", shown.join(" ")));
        log::info!("{algorithm:?} task {r}: accuracy {shown:?}");
        accuracy.push(row);
        rounds.push(RoundBytes {
            round: r,
            uploads: stats.uploads,
            upload_bytes: stats.upload_bytes,
            broadcast_bytes: stats.broadcast_bytes,
            consolidations: stats.consolidations,
        });
    }

    let cost = CostTable::new(
        &cfg.backbone,
        cfg.pool.groups as u64,
        b as u64,
        cfg.total_classes() as u64,
    );
    let class_to_group = fed
        .server
        .selector
        .classes()
        .filter_map(|c| fed.server.selector.group_of(c).map(|g| (c, g)))
        .collect();
    Ok(MetricsReport {
        algorithm,
        accuracy,
        pre_task_accuracy: pre_task,
        rounds,
        uploads: fed.server.received.clone(),
        events: fed.server.log.clone(),
        cost,
        class_to_group,
        wall_time_secs: started.elapsed().as_secs_f64(),
        config: cfg.clone(),
    })
}
