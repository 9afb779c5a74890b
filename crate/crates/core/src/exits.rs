//! Exit gating, calibration error and temperature scaling.

use serde::{Deserialize, Serialize};

use crate::error::{EatError, Result};
use crate::tensor::{Matrix, Scalar};

/// ECE above this triggers temperature scaling of the exit head.
pub const ECE_RECALIBRATION_THRESHOLD: f64 = 0.02;
pub const DEFAULT_ECE_BINS: usize = 15;

const TEMPERATURE_MIN: f64 = 0.25;
const TEMPERATURE_MAX: f64 = 8.0;
const TEMPERATURE_GRID: usize = 512;
const DISTRIBUTION_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateMode {
    /// Exit when the exit head's top probability reaches `tau`.
    Threshold,
    /// Additionally require the auxiliary and exit heads to agree on the argmax.
    Patience,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitPolicy {
    pub tau: f64,
    pub mode: GateMode,
    pub calibration_temperature: f64,
}

impl ExitPolicy {
    pub fn new(tau: f64, mode: GateMode) -> Result<Self> {
        let policy = ExitPolicy {
            tau,
            mode,
            calibration_temperature: 1.0,
        };
        policy.validate()?;
        Ok(policy)
    }

    pub fn threshold(tau: f64) -> Result<Self> {
        Self::new(tau, GateMode::Threshold)
    }

    /// Accepts `tau = 0` as well, which makes the gate fire unconditionally.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(EatError::invalid(format!("tau must lie in [0, 1], got {}", self.tau)));
        }
        if !(self.calibration_temperature > 0.0 && self.calibration_temperature.is_finite()) {
            return Err(EatError::invalid(format!(
                "calibration temperature must be positive, got {}",
                self.calibration_temperature
            )));
        }
        Ok(())
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.calibration_temperature = temperature;
        self
    }
}

fn check_distribution(probs: &[f64]) -> Result<()> {
    let total: f64 = probs.iter().sum();
    if probs.is_empty() || probs.iter().any(|p| !(0.0..=1.0).contains(p)) || (total - 1.0).abs() > DISTRIBUTION_TOLERANCE {
        return Err(EatError::invalid(format!("not a probability distribution (sum {total})")));
    }
    Ok(())
}

pub fn max_prob(probs: &[f64]) -> f64 {
    probs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Index of the largest entry; the first one wins on ties.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Confidence gate: `max_c p_c >= tau`.
pub fn exit_decision(probs: &[f64], policy: &ExitPolicy) -> Result<bool> {
    check_distribution(probs)?;
    Ok(max_prob(probs) >= policy.tau)
}

/// Patience gate: the auxiliary and exit heads agree and the exit head is
/// confident.
pub fn patience_decision(argmax_aux: usize, argmax_exit: usize, probs_exit: &[f64], policy: &ExitPolicy) -> Result<bool> {
    Ok(argmax_aux == argmax_exit && exit_decision(probs_exit, policy)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub size: usize,
    pub accuracy: f64,
    pub mean_confidence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub ece: f64,
    pub bin_count: usize,
    pub samples: usize,
    pub bins: Vec<CalibrationBin>,
    pub fitted_temperature: Option<f64>,
}

impl CalibrationReport {
    /// ECE recomputed from the stored bins.
    pub fn ece_from_bins(&self) -> f64 {
        let n = self.samples as f64;
        self.bins
            .iter()
            .filter(|b| b.size > 0)
            .map(|b| b.size as f64 / n * (b.accuracy - b.mean_confidence).abs())
            .sum()
    }
}

/// Expected calibration error over equal-width bins on `[0, 1]`. Bins are
/// half-open except the last, which includes 1.0.
pub fn compute_ece(confidences: &[f64], correct: &[bool], bins: usize) -> Result<CalibrationReport> {
    if confidences.is_empty() {
        return Err(EatError::invalid("ECE needs at least one prediction"));
    }
    if confidences.len() != correct.len() {
        return Err(EatError::invalid(format!(
            "{} confidences but {} correctness flags",
            confidences.len(),
            correct.len()
        )));
    }
    if bins == 0 {
        return Err(EatError::invalid("ECE needs at least one bin"));
    }
    if let Some(c) = confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(EatError::invalid(format!("confidence {c} outside [0, 1]")));
    }
    let mut size = vec![0usize; bins];
    let mut hits = vec![0usize; bins];
    let mut conf_sum = vec![0.0f64; bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let b = ((c * bins as f64) as usize).min(bins - 1);
        size[b] += 1;
        hits[b] += ok as usize;
        conf_sum[b] += c;
    }
    let n = confidences.len() as f64;
    let mut ece = 0.0;
    let mut out = Vec::with_capacity(bins);
    for b in 0..bins {
        let (accuracy, mean_confidence) = if size[b] == 0 {
            (0.0, 0.0)
        } else {
            (hits[b] as f64 / size[b] as f64, conf_sum[b] / size[b] as f64)
        };
        if size[b] > 0 {
            ece += size[b] as f64 / n * (accuracy - mean_confidence).abs();
        }
        out.push(CalibrationBin {
            lower: b as f64 / bins as f64,
            upper: (b + 1) as f64 / bins as f64,
            size: size[b],
            accuracy,
            mean_confidence,
        });
    }
    Ok(CalibrationReport {
        ece,
        bin_count: bins,
        samples: confidences.len(),
        bins: out,
        fitted_temperature: None,
    })
}

/// Mean negative log-likelihood of `softmax(logits / temperature)`.
pub fn nll_at_temperature<T: Scalar>(logits: &Matrix<T>, labels: &[usize], temperature: f64) -> f64 {
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row: Vec<f64> = logits.row(r).iter().map(|v| v.as_f64() / temperature).collect();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / labels.len() as f64
}

/// Temperature minimizing NLL: a log-uniform grid over `[0.25, 8]`, then a
/// golden-section pass between the neighbours of the best grid point.
pub fn fit_temperature<T: Scalar>(logits: &Matrix<T>, labels: &[usize]) -> Result<f64> {
    if logits.rows() != labels.len() {
        return Err(EatError::invalid(format!(
            "{} logit rows but {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    if labels.is_empty() || logits.cols() < 2 {
        return Ok(1.0);
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= logits.cols()) {
        return Err(EatError::invalid(format!("label {y} out of range for {} classes", logits.cols())));
    }
    let nll = |t: f64| nll_at_temperature(logits, labels, t);
    let (lo, hi) = (TEMPERATURE_MIN.ln(), TEMPERATURE_MAX.ln());
    let step = (hi - lo) / (TEMPERATURE_GRID - 1) as f64;
    let grid: Vec<f64> = (0..TEMPERATURE_GRID).map(|i| (lo + step * i as f64).exp()).collect();
    let values: Vec<f64> = grid.iter().map(|&t| nll(t)).collect();
    let best = argmin(&values);

    let mut a = grid[best.saturating_sub(1)];
    let mut b = grid[(best + 1).min(TEMPERATURE_GRID - 1)];
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    let (mut fc, mut fd) = (nll(c), nll(d));
    for _ in 0..40 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = nll(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = nll(d);
        }
    }
    let refined = (a + b) / 2.0;
    let mut candidate = if nll(refined) <= values[best] { refined } else { grid[best] };
    if nll(candidate) > nll(1.0) {
        candidate = 1.0;
    }
    Ok(candidate)
}

fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v < values[best] {
            best = i;
        }
    }
    best
}

/// Returns the policy carrying the fitted temperature when ECE exceeds 2%.
pub fn calibrate_if_needed(report: &CalibrationReport, policy: &ExitPolicy) -> ExitPolicy {
    match report.fitted_temperature {
        Some(t) if report.ece > ECE_RECALIBRATION_THRESHOLD => policy.with_temperature(t),
        _ => *policy,
    }
}

/// ECE of the exit head on raw (unscaled) logits plus the fitted temperature.
pub fn calibration_report<T: Scalar>(logits: &Matrix<T>, labels: &[usize]) -> Result<CalibrationReport> {
    let mut confidences = Vec::with_capacity(labels.len());
    let mut correct = Vec::with_capacity(labels.len());
    for (r, &y) in labels.iter().enumerate() {
        let probs: Vec<f64> = crate::tensor::softmax(&logits.row(r).iter().map(|v| v.as_f64()).collect::<Vec<_>>());
        confidences.push(max_prob(&probs));
        correct.push(argmax(&probs) == y);
    }
    let mut report = compute_ece(&confidences, &correct, DEFAULT_ECE_BINS)?;
    report.fitted_temperature = Some(fit_temperature(logits, labels)?);
    Ok(report)
}
