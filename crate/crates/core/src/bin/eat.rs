use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use eat_core::bench::{
    self, best_tau, calibrate, component_timings, emit_frontier_plot, emit_summary_csv, run_ablation, run_baseline, run_sweep,
    SweepConfig, Variant,
};
use eat_core::costmodel::{cost_sweep, crossover, scaling_exponents, write_cost_csv, AdaptiveProfile, CostParams};
use eat_core::data::{read_jsonl, synthesize, write_jsonl, Splits, TaskSpec};
use eat_core::encoder::{fit, Model, ModelConfig, TrainConfig};
use eat_core::exits::{calibrate_if_needed, ExitPolicy};

/// Adaptive transformer encoder: training, evaluation and benchmarking.
#[derive(Parser)]
#[command(name = "eat", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON file with optional `model`, `train`, `task` and `sweep` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed (data, initialization, timing order).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/dev splits as JSON lines.
    GenData,
    /// Train a model (and a distillation teacher when `mu > 0`).
    Train,
    /// Accuracy and adaptivity of the trained model on dev.
    Eval {
        /// Exit threshold; omit to run every example to full depth.
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Threshold sweep: summary CSV, frontier plot, calibration and traces.
    Sweep {
        /// Comma-separated thresholds.
        #[arg(long, value_delimiter = ',')]
        taus: Option<Vec<f64>>,
    },
    /// Sweep plus a per-component timing breakdown.
    Bench {
        #[arg(long, value_delimiter = ',')]
        taus: Option<Vec<f64>>,
    },
    /// Train and evaluate component ablations.
    Ablate {
        /// Comma-separated variants (default: all).
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
        #[arg(long, default_value_t = 0.9)]
        tau: f64,
    },
    /// Analytic cost sweep over sequence lengths.
    Cost {
        #[arg(long, value_delimiter = ',', default_values_t = vec![16usize, 32, 64, 128, 256, 512, 1024])]
        lengths: Vec<usize>,
        /// Use the scheduled retention profile even when a trained model exists.
        #[arg(long)]
        analytic: bool,
    },
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    model: ModelConfig,
    train: TrainConfig,
    task: TaskSpec,
    sweep: SweepConfig,
}

impl RunConfig {
    fn load(common: &Common) -> Result<Self> {
        let mut cfg: RunConfig = match &common.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(seed) = common.seed {
            cfg.task.seed = seed;
            cfg.train.seed = seed;
            cfg.sweep.protocol.base_seed = seed;
        }
        cfg.model.vocab_size = cfg.task.vocab_size;
        cfg.model.num_classes = cfg.task.num_classes;
        cfg.model.validate()?;
        cfg.train.validate()?;
        cfg.task.validate()?;
        Ok(cfg)
    }
}

struct Paths {
    out: PathBuf,
}

impl Paths {
    fn file(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn load_splits(cfg: &RunConfig, paths: &Paths) -> Result<Splits> {
    let (train, dev) = (paths.file("train.jsonl"), paths.file("dev.jsonl"));
    if train.exists() && dev.exists() {
        return Ok(Splits {
            train: read_jsonl(&train)?,
            dev: read_jsonl(&dev)?,
        });
    }
    let splits = synthesize(&cfg.task)?;
    write_jsonl(&train, &splits.train)?;
    write_jsonl(&dev, &splits.dev)?;
    Ok(splits)
}

fn load_model(paths: &Paths) -> Result<Model> {
    let path = paths.file("model.eatc");
    Model::load(&path).with_context(|| format!("loading {} (run `eat train` first)", path.display()))
}

fn taus_or_default(cfg: &RunConfig, taus: Option<Vec<f64>>) -> SweepConfig {
    let mut sweep = cfg.sweep.clone();
    if let Some(t) = taus {
        sweep.taus = t;
    }
    sweep
}

fn gen_data(cfg: &RunConfig, paths: &Paths) -> Result<()> {
    let splits = synthesize(&cfg.task)?;
    write_jsonl(&paths.file("train.jsonl"), &splits.train)?;
    write_jsonl(&paths.file("dev.jsonl"), &splits.dev)?;
    println!("wrote {} train and {} dev examples to {}", splits.train.len(), splits.dev.len(), paths.out.display());
    Ok(())
}

fn train(cfg: &RunConfig, paths: &Paths) -> Result<()> {
    let splits = load_splits(cfg, paths)?;
    let fitted = fit(cfg.model.clone(), &splits.train, &cfg.train)?;
    let meta = serde_json::json!({ "train": cfg.train, "task": cfg.task });
    fitted.model.save(&paths.file("model.eatc"), meta.clone())?;
    if let Some(teacher) = &fitted.teacher {
        teacher.save(&paths.file("teacher.eatc"), meta)?;
    }
    write_json(
        &paths.file("config.json"),
        &serde_json::json!({ "model": cfg.model, "train": cfg.train }),
    )?;
    let log_path = paths.file("train_log.jsonl");
    let mut w = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    fitted.log.write_jsonl(&mut w)?;
    w.flush()?;
    for e in &fitted.log.epochs {
        println!("epoch {}: loss {:.4}, train accuracy {:.2}%", e.epoch, e.mean_loss, 100.0 * e.accuracy);
    }
    Ok(())
}

fn eval(cfg: &RunConfig, paths: &Paths, tau: Option<f64>) -> Result<()> {
    let splits = load_splits(cfg, paths)?;
    let model = load_model(paths)?;
    let policy = match tau {
        Some(t) => {
            let report = calibrate(&model, &splits.dev, cfg.sweep.execution)?;
            Some(calibrate_if_needed(&report, &ExitPolicy::new(t, cfg.sweep.mode)?))
        }
        None => None,
    };
    let e = bench::evaluate(&model, &splits.dev, policy.as_ref(), cfg.sweep.execution)?;
    let summary = serde_json::json!({
        "tau": tau,
        "accuracy": e.accuracy,
        "avg_depth": e.avg_depth,
        "retention_pct": e.retention_pct,
        "flops_norm": e.flops_norm,
        "early_exit_rate": e.early_exit_rate,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn sweep(cfg: &RunConfig, paths: &Paths, sweep: &SweepConfig, with_components: bool) -> Result<()> {
    let splits = load_splits(cfg, paths)?;
    let model = load_model(paths)?;
    let report = calibrate(&model, &splits.dev, sweep.execution)?;
    let base = ExitPolicy::new(sweep.taus.first().copied().unwrap_or(1.0), sweep.mode)?;
    let temperature = calibrate_if_needed(&report, &base).calibration_temperature;
    info!("exit head ECE {:.4}, temperature {temperature:.3}", report.ece);
    write_json(&paths.file("calibration.json"), &report)?;

    let mut points = run_sweep(&model, "eat", &splits.dev, temperature, sweep)?;
    let teacher_path = paths.file("teacher.eatc");
    if teacher_path.exists() {
        let teacher = Model::load(&teacher_path)?;
        points.push(run_baseline(&teacher, "dense", &splits.dev, sweep)?);
    }
    let rows: Vec<_> = points.iter().map(|p| p.row.clone()).collect();
    emit_summary_csv(&rows, &paths.file("summary.csv"))?;
    emit_frontier_plot(&rows, &paths.file("frontier.svg"))?;

    let trace_path = paths.file("traces.jsonl");
    let mut w = BufWriter::new(File::create(&trace_path).with_context(|| format!("creating {}", trace_path.display()))?);
    for p in &points {
        for (ex, t) in splits.dev.iter().zip(&p.evaluation.traces) {
            let line = serde_json::json!({
                "model": p.row.model,
                "tau": p.row.tau,
                "label": ex.label,
                "difficulty": ex.difficulty,
                "trace": t,
            });
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    let timings: Vec<_> = points
        .iter()
        .map(|p| serde_json::json!({ "model": p.row.model, "tau": p.row.tau, "timing": p.timing }))
        .collect();
    write_json(&paths.file("timing.json"), &timings)?;

    print!("{}", bench::summary_csv_string(&rows)?);
    if let Some(best) = best_tau(&points) {
        println!("best tau on dev: {:.2}", best.row.tau.unwrap_or_default());
    }

    if with_components {
        let policy = ExitPolicy::new(best_tau(&points).and_then(|p| p.row.tau).unwrap_or(1.0), sweep.mode)?
            .with_temperature(temperature);
        let times = component_timings(&model, &splits.dev, Some(&policy), 1)?;
        let us = |d: std::time::Duration| d.as_secs_f64() * 1e6;
        let breakdown = serde_json::json!({
            "tau": policy.tau,
            "attention_us": us(times.attention),
            "ffn_us": us(times.ffn),
            "pruning_us": us(times.pruning),
            "exit_heads_us": us(times.exit_heads),
        });
        write_json(&paths.file("components.json"), &breakdown)?;
        println!("per-example component time: {}", serde_json::to_string(&breakdown)?);
    }
    Ok(())
}

fn ablate(cfg: &RunConfig, paths: &Paths, variants: Option<Vec<String>>, tau: f64) -> Result<()> {
    let variants: Vec<Variant> = match variants {
        Some(v) => v.iter().map(|s| s.parse()).collect::<eat_core::Result<_>>()?,
        None => Variant::ALL.to_vec(),
    };
    let splits = load_splits(cfg, paths)?;
    let rows = run_ablation(&splits, &cfg.model, &cfg.train, &variants, tau, &cfg.sweep)?;
    let frontier: Vec<_> = rows.iter().map(|r| r.row.clone()).collect();
    emit_summary_csv(&frontier, &paths.file("ablation.csv"))?;
    write_json(&paths.file("ablation.json"), &rows)?;
    println!("variant,accuracy,accuracy_delta,avg_depth,retention_pct,flops_norm");
    for r in &rows {
        println!(
            "{},{:.2},{:+.2},{:.2},{:.2},{:.4}",
            r.variant, r.row.accuracy, r.accuracy_delta, r.row.avg_depth, r.row.retention_pct, r.row.flops_norm
        );
    }
    Ok(())
}

fn cost(cfg: &RunConfig, paths: &Paths, lengths: &[usize], analytic: bool) -> Result<()> {
    if lengths.is_empty() {
        bail!("no lengths given");
    }
    let params = CostParams::from_model(&cfg.model);
    let scheduled = || -> Result<AdaptiveProfile> {
        let mut r = 1.0;
        let mut retention = Vec::with_capacity(cfg.model.layers);
        for l in 1..=cfg.model.layers {
            retention.push(r);
            if cfg.model.active_prune_layers().contains(&l) {
                r *= 1.0 - cfg.model.prune_ratio;
            }
        }
        Ok(AdaptiveProfile::full_depth(retention)?)
    };
    let profile = if !analytic && paths.file("model.eatc").exists() {
        let model = load_model(paths)?;
        let splits = load_splits(cfg, paths)?;
        let report = calibrate(&model, &splits.dev, cfg.sweep.execution)?;
        let tau = cfg.sweep.taus.last().copied().unwrap_or(0.9);
        let policy = calibrate_if_needed(&report, &ExitPolicy::new(tau, cfg.sweep.mode)?);
        let e = bench::evaluate(&model, &splits.dev, Some(&policy), cfg.sweep.execution)?;
        AdaptiveProfile::from_traces(&e.traces, cfg.model.layers)?
    } else {
        scheduled()?
    };
    let rows = cost_sweep(lengths, &profile, &params)?;
    write_cost_csv(&paths.file("cost.csv"), &rows)?;
    println!("T,dense_cost,eat_cost,ratio");
    for r in &rows {
        println!("{},{:.2},{:.2},{:.4}", r.t, r.dense_cost, r.eat_cost, r.ratio);
    }
    match crossover(&rows) {
        Some(t) => println!("adaptive cost drops below dense from T = {t}"),
        None => println!("adaptive cost never drops below dense over the swept lengths"),
    }
    let ts: Vec<f64> = lengths.iter().map(|&t| t as f64).collect();
    if let Ok(e) = scaling_exponents(&params, &profile, &ts) {
        println!("fitted exponents: dense {:.3}, adaptive {:.3}", e.dense, e.eat);
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = RunConfig::load(&cli.common)?;
    fs::create_dir_all(&cli.common.out).with_context(|| format!("creating {}", cli.common.out.display()))?;
    let paths = Paths { out: cli.common.out };
    match cli.command {
        Command::GenData => gen_data(&cfg, &paths),
        Command::Train => train(&cfg, &paths),
        Command::Eval { tau } => eval(&cfg, &paths, tau),
        Command::Sweep { taus } => sweep(&cfg, &paths, &taus_or_default(&cfg, taus), false),
        Command::Bench { taus } => sweep(&cfg, &paths, &taus_or_default(&cfg, taus), true),
        Command::Ablate { variants, tau } => ablate(&cfg, &paths, variants, tau),
        Command::Cost { lengths, analytic } => cost(&cfg, &paths, &lengths, analytic),
    }
}
