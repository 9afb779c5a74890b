//! Evaluation harness: threshold sweeps, timing, calibration, ablations and
//! the CSV/SVG reports.

mod report;
mod timing;

pub use report::{
    emit_frontier_plot, emit_summary_csv, frontier_svg, parse_summary_csv, summary_csv_string, FrontierRow, SUMMARY_HEADER,
};
pub use timing::{time_inference, TimingProtocol, TimingReport};

use std::fmt;
use std::str::FromStr;

use log::info;
use serde::{Deserialize, Serialize};

use crate::costmodel::measured_flops;
use crate::data::{Difficulty, Example, Splits};
use crate::encoder::{fit, AttentionKind, ComponentTimes, ForwardTrace, Model, ModelConfig, TrainConfig};
use crate::error::{EatError, Result};
use crate::exits::{calibrate_if_needed, calibration_report, CalibrationReport, ExitPolicy, GateMode};
use crate::par::{self, Execution};
use crate::tensor::Matrix;

pub const DEFAULT_TAUS: [f64; 4] = [0.80, 0.85, 0.90, 0.95];

/// Accuracy and adaptivity statistics over a dev set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub avg_depth: f64,
    /// Mean final retention, percent.
    pub retention_pct: f64,
    pub flops_norm: f64,
    /// Fraction of examples that stopped before the last layer.
    pub early_exit_rate: f64,
    pub traces: Vec<ForwardTrace>,
}

impl Evaluation {
    /// Early-exit rate restricted to examples of one difficulty.
    pub fn early_exit_rate_for(&self, dev: &[Example], difficulty: Difficulty, layers: usize) -> f64 {
        let picked: Vec<&ForwardTrace> = dev
            .iter()
            .zip(&self.traces)
            .filter(|(e, _)| e.difficulty == difficulty)
            .map(|(_, t)| t)
            .collect();
        if picked.is_empty() {
            return 0.0;
        }
        picked.iter().filter(|t| t.exit_layer < layers).count() as f64 / picked.len() as f64
    }
}

pub fn evaluate(model: &Model, dev: &[Example], policy: Option<&ExitPolicy>, exec: Execution) -> Result<Evaluation> {
    if dev.is_empty() {
        return Err(EatError::invalid("empty evaluation set"));
    }
    let traces = par::try_map(dev, exec, |ex| model.forward(&ex.ids, policy))?;
    let n = dev.len() as f64;
    let cfg = model.config();
    let correct = dev.iter().zip(&traces).filter(|(e, t)| t.prediction == e.label).count();
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        avg_depth: traces.iter().map(|t| t.exit_layer as f64).sum::<f64>() / n,
        retention_pct: 100.0 * traces.iter().map(|t| t.retention).sum::<f64>() / n,
        flops_norm: traces.iter().map(|t| measured_flops(t, cfg).normalized).sum::<f64>() / n,
        early_exit_rate: traces.iter().filter(|t| t.exit_layer < cfg.layers).count() as f64 / n,
        traces,
    })
}

/// ECE of the early-exit head on `dev`, with the fitted temperature.
pub fn calibrate(model: &Model, dev: &[Example], exec: Execution) -> Result<CalibrationReport> {
    let layer = model.config().exit_layer;
    let traces = par::try_map(dev, exec, |ex| model.forward(&ex.ids, None))?;
    let classes = model.config().num_classes;
    let mut data = Vec::with_capacity(dev.len() * classes);
    for t in &traces {
        let rec = t.exit(layer).ok_or_else(|| EatError::invalid(format!("no head at layer {layer}")))?;
        data.extend(rec.logits.iter().copied());
    }
    let logits = Matrix::from_vec(dev.len(), classes, data)?;
    let labels: Vec<usize> = dev.iter().map(|e| e.label).collect();
    calibration_report(&logits, &labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub taus: Vec<f64>,
    pub mode: GateMode,
    pub protocol: TimingProtocol,
    pub execution: Execution,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            taus: DEFAULT_TAUS.to_vec(),
            mode: GateMode::Threshold,
            protocol: TimingProtocol::default(),
            execution: Execution::Parallel,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SweepPoint {
    pub row: FrontierRow,
    pub evaluation: Evaluation,
    pub timing: TimingReport,
}

fn measure(model: &Model, name: &str, dev: &[Example], policy: Option<&ExitPolicy>, cfg: &SweepConfig) -> Result<SweepPoint> {
    let evaluation = evaluate(model, dev, policy, cfg.execution)?;
    let timing = time_inference(|ids| model.forward(ids, policy).map(drop), dev, &cfg.protocol)?;
    let row = FrontierRow {
        model: name.to_string(),
        tau: policy.map(|p| p.tau),
        accuracy: 100.0 * evaluation.accuracy,
        latency_ms: timing.latency_ms,
        throughput: timing.throughput,
        avg_depth: evaluation.avg_depth,
        retention_pct: evaluation.retention_pct,
        flops_norm: evaluation.flops_norm,
    };
    info!(
        "{name} tau={:?}: acc {:.2}% depth {:.2} latency {:.3} ms",
        row.tau, row.accuracy, row.avg_depth, row.latency_ms
    );
    Ok(SweepPoint { row, evaluation, timing })
}

/// One point per threshold, then the never-exit point of the same model
/// (named `<name>-no-exit`). `temperature` rescales the exit head.
pub fn run_sweep(model: &Model, name: &str, dev: &[Example], temperature: f64, cfg: &SweepConfig) -> Result<Vec<SweepPoint>> {
    if dev.is_empty() {
        return Err(EatError::invalid("empty dev set"));
    }
    let mut points = Vec::with_capacity(cfg.taus.len() + 1);
    for &tau in &cfg.taus {
        let policy = ExitPolicy::new(tau, cfg.mode)?.with_temperature(temperature);
        points.push(measure(model, name, dev, Some(&policy), cfg)?);
    }
    points.push(measure(model, &format!("{name}-no-exit"), dev, None, cfg)?);
    Ok(points)
}

/// Baseline point without any threshold (e.g. a dense model).
pub fn run_baseline(model: &Model, name: &str, dev: &[Example], cfg: &SweepConfig) -> Result<SweepPoint> {
    measure(model, name, dev, None, cfg)
}

/// Threshold with the highest accuracy; ties go to the shallower average
/// depth, then to the lower threshold.
pub fn best_tau(points: &[SweepPoint]) -> Option<&SweepPoint> {
    points.iter().filter(|p| p.row.tau.is_some()).min_by(|a, b| {
        b.evaluation
            .accuracy
            .total_cmp(&a.evaluation.accuracy)
            .then(a.evaluation.avg_depth.total_cmp(&b.evaluation.avg_depth))
            .then(a.row.tau.unwrap_or(0.0).total_cmp(&b.row.tau.unwrap_or(0.0)))
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoPruning,
    NoSparse,
    NoExit,
    PruningOnly,
    SparseOnly,
    ExitOnly,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::NoPruning,
        Variant::NoSparse,
        Variant::NoExit,
        Variant::PruningOnly,
        Variant::SparseOnly,
        Variant::ExitOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoPruning => "no-pruning",
            Variant::NoSparse => "no-sparse",
            Variant::NoExit => "no-exit",
            Variant::PruningOnly => "pruning-only",
            Variant::SparseOnly => "sparse-only",
            Variant::ExitOnly => "exit-only",
        }
    }

    /// `(pruning, sparse attention, early exit)`.
    pub fn components(self) -> (bool, bool, bool) {
        match self {
            Variant::Full => (true, true, true),
            Variant::NoPruning => (false, true, true),
            Variant::NoSparse => (true, false, true),
            Variant::NoExit => (true, true, false),
            Variant::PruningOnly => (true, false, false),
            Variant::SparseOnly => (false, true, false),
            Variant::ExitOnly => (false, false, true),
        }
    }

    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let (pruning, sparse, early_exit) = self.components();
        ModelConfig {
            pruning,
            early_exit,
            attention: if sparse { AttentionKind::Sparse } else { AttentionKind::Dense },
            ..base.clone()
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = EatError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| EatError::invalid(format!("unknown ablation variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub row: FrontierRow,
    /// Accuracy minus the full variant's, in percentage points.
    pub accuracy_delta: f64,
}

/// Trains and evaluates each variant on the same data and seed. Adaptive
/// variants run at threshold `tau` with the exit head recalibrated when
/// its ECE is above 2%.
pub fn run_ablation(
    splits: &Splits,
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    variants: &[Variant],
    tau: f64,
    sweep: &SweepConfig,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        info!("ablation: training {variant}");
        let config = variant.apply(base);
        let fitted = fit(config, &splits.train, train_cfg)?;
        let model = fitted.model;
        let policy = if model.config().early_exit {
            let report = calibrate(&model, &splits.dev, sweep.execution)?;
            Some(calibrate_if_needed(&report, &ExitPolicy::new(tau, sweep.mode)?))
        } else {
            None
        };
        let point = measure(&model, variant.name(), &splits.dev, policy.as_ref(), sweep)?;
        rows.push(AblationRow {
            variant,
            row: point.row,
            accuracy_delta: 0.0,
        });
    }
    if let Some(full) = rows.iter().find(|r| r.variant == Variant::Full).map(|r| r.row.accuracy) {
        for r in &mut rows {
            r.accuracy_delta = r.row.accuracy - full;
        }
    }
    Ok(rows)
}

/// Per-example wall-clock split into attention, FFN, pruning and exit heads.
pub fn component_timings(model: &Model, dev: &[Example], policy: Option<&ExitPolicy>, repeats: usize) -> Result<ComponentTimes> {
    let mut total = ComponentTimes::default();
    let ratios = crate::encoder::target_ratios(model.config());
    for _ in 0..repeats.max(1) {
        for ex in dev {
            let mut t = ComponentTimes::default();
            model.forward_with(&ex.ids, &ratios, policy, Some(&mut t))?;
            total.add(&t);
        }
    }
    let n = (dev.len() * repeats.max(1)).max(1) as u32;
    Ok(ComponentTimes {
        attention: total.attention / n,
        ffn: total.ffn / n,
        pruning: total.pruning / n,
        exit_heads: total.exit_heads / n,
    })
}
