//! Analytic expected-compute model and operation counting on traces.
//!
//! Dense cost per layer is `α·T² + β·T`. The adaptive model pays
//! `α'·T_ℓ·k + β·T_ℓ` at layer ℓ, only when the example reaches that layer,
//! with `T_ℓ = r_ℓ·T` tokens surviving pruning.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{ForwardTrace, ModelConfig};
use crate::error::{EatError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    /// Cost per query-key pair of dense attention.
    pub alpha: f64,
    /// Cost per query-key pair of windowed attention.
    pub alpha_prime: f64,
    /// Cost per token of the feed-forward block.
    pub beta: f64,
    pub k: usize,
    pub layers: usize,
}

impl CostParams {
    pub fn new(alpha: f64, alpha_prime: f64, beta: f64, k: usize, layers: usize) -> Result<Self> {
        let params = CostParams {
            alpha,
            alpha_prime,
            beta,
            k,
            layers,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if [self.alpha, self.alpha_prime, self.beta].iter().any(|v| !(*v >= 0.0 && v.is_finite())) || self.layers == 0 {
            return Err(EatError::invalid("cost coefficients must be nonnegative and depth positive"));
        }
        Ok(())
    }

    /// Multiply-accumulate counts of the encoder: a pair costs one
    /// `head_dim` dot product for the score and one for mixing values in
    /// every head (`2·d`); a token costs `2·d·d_ff` in the feed-forward block.
    pub fn from_model(config: &ModelConfig) -> Self {
        let alpha = 2.0 * config.d_model as f64;
        CostParams {
            alpha,
            alpha_prime: alpha,
            beta: 2.0 * (config.d_model * config.d_ff) as f64,
            k: config.window,
            layers: config.layers,
        }
    }
}

/// Per-layer expected retention `r_ℓ` and survival `Pr(L' ≥ ℓ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveProfile {
    retention: Vec<f64>,
    survival: Vec<f64>,
}

impl AdaptiveProfile {
    pub fn new(retention: Vec<f64>, survival: Vec<f64>) -> Result<Self> {
        let nonincreasing = |v: &[f64]| v.windows(2).all(|w| w[1] <= w[0] + 1e-12);
        if retention.len() != survival.len() || retention.is_empty() {
            return Err(EatError::invalid("retention and survival need the same nonzero length"));
        }
        if !nonincreasing(&retention) || retention.iter().any(|&r| !(r > 0.0 && r <= 1.0)) {
            return Err(EatError::invalid(format!("retention {retention:?} must be nonincreasing in (0, 1]")));
        }
        if !nonincreasing(&survival) || survival.iter().any(|&s| !(0.0..=1.0).contains(&s)) || survival[0] != 1.0 {
            return Err(EatError::invalid(format!(
                "survival {survival:?} must start at 1 and be nonincreasing in [0, 1]"
            )));
        }
        Ok(AdaptiveProfile { retention, survival })
    }

    /// Pruning only: every example runs all `retention.len()` layers.
    pub fn full_depth(retention: Vec<f64>) -> Result<Self> {
        let n = retention.len();
        Self::new(retention, vec![1.0; n])
    }

    /// Empirical profile: mean fraction of input tokens entering each layer
    /// among examples reaching it, and the fraction of examples reaching it.
    pub fn from_traces(traces: &[ForwardTrace], layers: usize) -> Result<Self> {
        if traces.is_empty() {
            return Err(EatError::invalid("no traces"));
        }
        let mut retention = Vec::with_capacity(layers);
        let mut survival = Vec::with_capacity(layers);
        for l in 0..layers {
            let reaching: Vec<&ForwardTrace> = traces.iter().filter(|t| t.token_counts.len() > l).collect();
            survival.push(reaching.len() as f64 / traces.len() as f64);
            let r = if reaching.is_empty() {
                *retention.last().unwrap_or(&1.0)
            } else {
                reaching
                    .iter()
                    .map(|t| t.token_counts[l] as f64 / t.token_counts[0] as f64)
                    .sum::<f64>()
                    / reaching.len() as f64
            };
            // Averages over a shrinking population need not be monotone.
            let r = retention.last().map_or(r, |&prev: &f64| r.min(prev));
            retention.push(r);
        }
        Self::new(retention, survival)
    }

    pub fn retention(&self) -> &[f64] {
        &self.retention
    }

    pub fn survival(&self) -> &[f64] {
        &self.survival
    }

    pub fn mean_retention(&self) -> f64 {
        self.retention.iter().sum::<f64>() / self.retention.len() as f64
    }

    pub fn mean_survival(&self) -> f64 {
        self.survival.iter().sum::<f64>() / self.survival.len() as f64
    }
}

/// `L·(α·T² + β·T)`.
pub fn dense_expected_cost(t: f64, params: &CostParams) -> f64 {
    params.layers as f64 * (params.alpha * t * t + params.beta * t)
}

/// `Σ_ℓ Pr(L' ≥ ℓ)·(α'·r_ℓ·T·k + β·r_ℓ·T)`.
pub fn eat_expected_cost(t: f64, profile: &AdaptiveProfile, params: &CostParams) -> Result<f64> {
    if profile.retention.len() != params.layers {
        return Err(EatError::invalid(format!(
            "profile covers {} layers, model has {}",
            profile.retention.len(),
            params.layers
        )));
    }
    Ok(profile
        .retention
        .iter()
        .zip(&profile.survival)
        .map(|(&r, &s)| {
            let tl = r * t;
            s * (params.alpha_prime * tl * params.k as f64 + params.beta * tl)
        })
        .sum())
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingExponents {
    pub dense: f64,
    pub eat: f64,
}

/// Fitted growth exponents of the dense and adaptive costs in `T`.
pub fn scaling_exponents(params: &CostParams, profile: &AdaptiveProfile, t_values: &[f64]) -> Result<ScalingExponents> {
    let mut distinct = t_values.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 4 || distinct[0] <= 0.0 || distinct[distinct.len() - 1] < 8.0 * distinct[0] {
        return Err(EatError::invalid("need at least 4 distinct positive lengths spanning 8x"));
    }
    let dense: Vec<f64> = distinct.iter().map(|&t| dense_expected_cost(t, params)).collect();
    let eat = distinct
        .iter()
        .map(|&t| eat_expected_cost(t, profile, params))
        .collect::<Result<Vec<f64>>>()?;
    Ok(ScalingExponents {
        dense: log_log_slope(&distinct, &dense),
        eat: log_log_slope(&distinct, &eat),
    })
}

/// Operation counts of one executed forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasuredFlops {
    /// Query-key pairs evaluated over executed layers.
    pub attention_pairs: usize,
    /// Token-layer visits of the feed-forward block.
    pub ffn_token_ops: usize,
    /// Weighted cost relative to the dense, unpruned, full-depth encoder on
    /// the same input length.
    pub normalized: f64,
}

pub fn measured_flops(trace: &ForwardTrace, config: &ModelConfig) -> MeasuredFlops {
    let params = CostParams::from_model(config);
    let attention_pairs: usize = trace.allowed_pairs.iter().sum();
    let ffn_token_ops: usize = trace.token_counts.iter().sum();
    let t = trace.input_tokens() as f64;
    let cost = params.alpha * attention_pairs as f64 + params.beta * ffn_token_ops as f64;
    MeasuredFlops {
        attention_pairs,
        ffn_token_ops,
        normalized: cost / dense_expected_cost(t, &params),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub t: usize,
    pub dense_cost: f64,
    pub eat_cost: f64,
    pub ratio: f64,
}

pub fn cost_sweep(t_values: &[usize], profile: &AdaptiveProfile, params: &CostParams) -> Result<Vec<CostRow>> {
    t_values
        .iter()
        .map(|&t| {
            let dense = dense_expected_cost(t as f64, params);
            let eat = eat_expected_cost(t as f64, profile, params)?;
            Ok(CostRow {
                t,
                dense_cost: dense,
                eat_cost: eat,
                ratio: eat / dense,
            })
        })
        .collect()
}

/// Smallest swept length at which the adaptive cost drops below dense.
pub fn crossover(rows: &[CostRow]) -> Option<usize> {
    rows.iter().find(|r| r.eat_cost < r.dense_cost).map(|r| r.t)
}

pub fn write_cost_csv(path: &Path, rows: &[CostRow]) -> Result<()> {
    let file = File::create(path).map_err(|e| EatError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut emit = || -> std::io::Result<()> {
        writeln!(w, "T,dense_cost,eat_cost,ratio")?;
        for r in rows {
            writeln!(w, "{},{:.2},{:.2},{:.4}", r.t, r.dense_cost, r.eat_cost, r.ratio)?;
        }
        w.flush()
    };
    emit().map_err(|e| EatError::io(path, e))
}
