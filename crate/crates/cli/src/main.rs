use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use fedet::distill::{center_targets_local, gradient_audit};
use fedet::enhancer::{EnhancerGroup, EnhancerParams};
use fedet::federation::{comm_cost, derive_seed, enhancer_flops, CostTable};
use fedet::harness::{run_experiment, write_report, Algorithm, ExperimentConfig, MetricsReport, Summary};
use fedet::memory::LabeledSample;
use fedet::{build_backbone, parallel, Tensor};

/// Federated class-incremental learning with frozen transformers and enhancer groups.
#[derive(Parser)]
#[command(name = "fedet", version)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML); for `replay`, a recorded summary.json.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for metrics.csv, summary.json and events.csv.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for the data-parallel core (1 = sequential).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args, Clone)]
struct CostArgs {
    #[command(flatten)]
    common: Common,
    /// Blocks D (overrides the config).
    #[arg(long)]
    depth: Option<u64>,
    /// Hidden width d.
    #[arg(long)]
    width: Option<u64>,
    /// Bottleneck b.
    #[arg(long)]
    bottleneck: Option<u64>,
    /// Head classes.
    #[arg(long)]
    labels: Option<u64>,
    /// Sequence length for the FLOP count.
    #[arg(long)]
    seq_len: Option<u64>,
}

#[derive(Subcommand)]
enum Verb {
    /// Run the FedET experiment.
    Run(Common),
    /// Run the naive fine-tune baseline.
    Baseline(Common),
    /// Audit enhancer and head gradients against finite differences.
    Gradcheck(Common),
    /// Print parameter and FLOP counts.
    Cost(CostArgs),
    /// Re-run a recorded experiment and compare its outputs.
    Replay(Common),
}

fn apply_threads(common: &Common) {
    if let Some(n) = common.threads {
        parallel::init_threads(n.max(1));
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let path = common.config.as_ref().context("--config is required")?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(common: &Common, cfg: &ExperimentConfig) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| cfg.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn thousands(n: u64) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

fn print_report(report: &MetricsReport, dir: &Path) {
    let s = report.summary();
    println!("algorithm: {:?}", report.algorithm);
    for (i, row) in report.accuracy.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|a| format!("{a:.3}")).collect();
        println!("after task {i}: [{}]", cells.join(", "));
    }
    if let Some(a) = s.final_average_accuracy {
        println!("final average accuracy: {a:.4}");
    }
    if let Some(a) = s.old_class_accuracy {
        println!("old-class accuracy: {a:.4}");
    }
    println!(
        "bytes: upload {} broadcast {}; uploads {}; consolidations {}",
        s.upload_bytes, s.broadcast_bytes, s.uploads, s.consolidations
    );
    println!("comm ratio: {:.6} ({} / {})", s.comm_ratio, s.upload_params_formula, s.total_params);
    println!("wall time: {:.2}s", report.wall_time_secs);
    println!("wrote {}", dir.display());
}

fn run(common: &Common, algorithm: Algorithm) -> Result<()> {
    apply_threads(common);
    let cfg = load_config(common)?;
    let report = run_experiment(&cfg, algorithm)?;
    let dir = out_dir(common, &cfg);
    write_report(&report, &dir)?;
    print_report(&report, &dir);
    Ok(())
}

fn gradcheck(common: &Common) -> Result<bool> {
    apply_threads(common);
    let cfg = load_config(common)?;
    let backbone = build_backbone(cfg.backbone.clone())?;
    let (d, b) = (cfg.backbone.width, cfg.pool.bottleneck);
    let seed = derive_seed(cfg.seed, &[0x6772_6164]);
    let enhancers = (0..cfg.backbone.depth)
        .map(|i| EnhancerParams::random(d, b, cfg.pool.activation, seed + i as u64, 0.3))
        .collect();
    let domain = vec![0, 1, 2];
    let head_data = (0..d * domain.len()).map(|i| 0.3 * (i as f64 * 1.3).cos()).collect();
    let head = Tensor::matrix(d, domain.len(), head_data)?;
    let group = EnhancerGroup::new(0, 0, enhancers, head, domain)?;
    let seq = cfg.stream.seq_len.min(cfg.backbone.max_seq_len);
    let f = cfg.backbone.feature_dim;
    let samples: Vec<LabeledSample> = (0..2u32)
        .map(|k| {
            let data = (0..seq * f).map(|i| ((i as f64 + 1.0) * (k as f64 + 0.7)).sin()).collect();
            LabeledSample::new(Tensor::matrix(seq, f, data).expect("shape"), k)
        })
        .collect();
    let targets = vec![
        center_targets_local(&[0.5, -0.2], &[1.0]).expect("segments"),
        center_targets_local(&[0.1], &[0.3, -0.4]).expect("segments"),
    ];
    let started = Instant::now();
    let err = gradient_audit(&group, &backbone, &samples, &targets, 1e-5)?;
    let ok = err < 1e-4;
    println!(
        "gradcheck: {} parameters, max relative error {err:.3e} (tolerance 1e-4): {} in {:.2}s",
        group.parameter_count(),
        if ok { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64()
    );
    Ok(ok)
}

fn cost(args: &CostArgs) -> Result<()> {
    let cfg = match &args.common.config {
        Some(_) => Some(load_config(&args.common)?),
        None => None,
    };
    let pick = |flag: Option<u64>, from_cfg: Option<u64>, name: &str| -> Result<u64> {
        flag.or(from_cfg)
            .with_context(|| format!("--{name} is required without --config"))
    };
    let c = cfg.as_ref();
    let depth = pick(args.depth, c.map(|c| c.backbone.depth as u64), "depth")?;
    let width = pick(args.width, c.map(|c| c.backbone.width as u64), "width")?;
    let bottleneck = pick(args.bottleneck, c.map(|c| c.pool.bottleneck as u64), "bottleneck")?;
    let labels = pick(args.labels, c.map(|c| c.total_classes() as u64), "labels")?;
    let seq = args
        .seq_len
        .or(c.map(|c| c.stream.seq_len as u64))
        .unwrap_or(0);
    let params = comm_cost(depth, width, bottleneck, labels);
    println!("comm_cost D={depth} d={width} b={bottleneck} labels={labels}: {} parameters", thousands(params));
    println!(
        "enhancer_flops d={width} b={bottleneck} seq_len={seq}: {}",
        thousands(enhancer_flops(width, bottleneck, seq))
    );
    if let Some(cfg) = c {
        let t = CostTable::new(&cfg.backbone, cfg.pool.groups as u64, bottleneck, labels);
        println!("backbone parameters: {}", thousands(t.backbone_params));
        println!("pool enhancer parameters (J={}): {}", cfg.pool.groups, thousands(t.pool_enhancer_params));
        println!("head parameters: {}", thousands(t.head_params));
        println!("total model parameters: {}", thousands(t.total_params()));
        println!("communication ratio: {:.6}", t.ratio());
    }
    Ok(())
}

fn replay(common: &Common) -> Result<bool> {
    apply_threads(common);
    let path = common.config.as_ref().context("--config must point to a recorded summary.json")?;
    let text = std::fs::read_to_string(path).with_context(|| path.display().to_string())?;
    let recorded = Summary::from_json(&text)?;
    let report = run_experiment(&recorded.config, recorded.algorithm)?;
    let fresh = report.summary();
    let mut ok = fresh.to_json() == text;
    let metrics = path.with_file_name("metrics.csv");
    if metrics.exists() {
        let old = std::fs::read_to_string(&metrics).with_context(|| metrics.display().to_string())?;
        ok &= old == report.metrics_csv();
    }
    if let Some(dir) = &common.out {
        write_report(&report, dir)?;
    }
    println!("replay of {}: {}", path.display(), if ok { "identical" } else { "DIFFERS" });
    Ok(ok)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.verb {
        Verb::Run(c) => run(c, Algorithm::Fedet).map(|_| true),
        Verb::Baseline(c) => run(c, Algorithm::Finetune).map(|_| true),
        Verb::Gradcheck(c) => gradcheck(c),
        Verb::Cost(a) => cost(a).map(|_| true),
        Verb::Replay(c) => replay(c),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
