//! Mini-batch training with decoupled weight decay, a warmup/decay learning
//! rate and the two-stage pruning schedule.

use std::collections::BTreeMap;
use std::io::Write;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, TrainConfig};
use super::loss::loss_on_graph;
use super::model::{forward_on_graph, Model};
use crate::data::Example;
use crate::error::{EatError, Result};
use crate::exits::argmax;
use crate::par;
use crate::pruning::{anneal_ratio, PruneSchedule};
use crate::tensor::{Graph, Matrix, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    /// Pruning ratio per scheduled layer, keyed `p_<layer>`.
    #[serde(flatten)]
    pub ratios: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Final-head accuracy on the training examples as seen during the epoch.
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochSummary>,
    pub schedule: Option<PruneSchedule>,
    pub steps_per_epoch: usize,
}

impl TrainLog {
    pub fn write_jsonl(&self, out: &mut impl Write) -> Result<()> {
        for s in &self.steps {
            serde_json::to_writer(&mut *out, s)?;
            out.write_all(b"\n").map_err(|e| EatError::io("training log", e))?;
        }
        Ok(())
    }
}

/// Learning rate at `step` (0-based) of `total`: linear warmup, then linear
/// decay to zero at the end of training.
pub fn learning_rate(step: usize, total: usize, cfg: &TrainConfig) -> f64 {
    let warmup = ((total as f64) * cfg.warmup_fraction).ceil() as usize;
    if step < warmup {
        cfg.learning_rate * (step + 1) as f64 / warmup as f64
    } else {
        let span = total.saturating_sub(warmup).max(1) as f64;
        cfg.learning_rate * (total.saturating_sub(step).max(1)) as f64 / span
    }
}

/// Adaptive moment estimation with weight decay applied directly to the
/// parameters rather than through the gradient.
#[derive(Clone, Debug)]
pub struct AdamW {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    steps: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl AdamW {
    pub fn new(params: &[Matrix], cfg: &TrainConfig) -> Self {
        let zeros = || params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        AdamW {
            m: zeros(),
            v: zeros(),
            steps: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        }
    }

    pub fn step(&mut self, params: &mut [Matrix], grads: &[Matrix], decay: &[bool], lr: f64) {
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps);
        let c2 = 1.0 - self.beta2.powi(self.steps);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        for i in 0..params.len() {
            let wd = if decay[i] { (lr * self.weight_decay) as f32 } else { 0.0 };
            let p = params[i].data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(grads[i].data()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let update = (*m as f64 / c1) / ((*v as f64 / c2).sqrt() + self.eps);
                *p -= wd * *p + (lr * update) as f32;
            }
        }
    }
}

struct ExampleGrad {
    loss: f64,
    correct: bool,
    grads: Vec<Option<Matrix>>,
}

fn example_gradient(
    model: &Model,
    ex: &Example,
    ratios: &[f64],
    teacher_logits: Option<&[f64]>,
    scale: f64,
) -> Result<ExampleGrad> {
    let cfg = model.config();
    let mut g = Graph::new(model.params());
    let fwd = forward_on_graph(cfg, &mut g, &ex.ids, ratios)?;
    let loss = loss_on_graph(cfg, &mut g, &fwd, ex.label, teacher_logits)?;
    let loss_value = g.value(loss).get(0, 0).as_f64();
    let final_logits = g.value(fwd.logits.last().expect("final head").1).data().to_vec();
    let scaled = g.scale(loss, scale)?;
    let grads = g.backward(scaled)?.into_params();
    Ok(ExampleGrad {
        loss: loss_value,
        correct: argmax(&final_logits) == ex.label,
        grads,
    })
}

fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Final-head logits of `teacher` for every example (full depth, no gate).
pub fn teacher_logits(teacher: &Model, data: &[Example], exec: par::Execution) -> Result<Vec<Vec<f64>>> {
    par::try_map(data, exec, |ex| {
        let trace = teacher.forward(&ex.ids, None)?;
        Ok(trace.exits.last().expect("final head").logits.clone())
    })
}

/// Trains `model` in place. With `teacher` set and `mu > 0` the distillation
/// term is active.
pub fn train(model: &mut Model, data: &[Example], cfg: &TrainConfig, teacher: Option<&Model>) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(EatError::invalid("cannot train on an empty dataset"));
    }
    let mcfg = model.config().clone();
    let soft_targets = match teacher {
        Some(t) if mcfg.mu > 0.0 => Some(teacher_logits(t, data, cfg.execution)?),
        _ => None,
    };

    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let prune_layers = mcfg.active_prune_layers().to_vec();
    let schedule = if prune_layers.is_empty() {
        None
    } else {
        Some(PruneSchedule::two_stage(prune_layers.clone(), mcfg.prune_ratio, steps_per_epoch, cfg.epochs)?)
    };
    let decay = model.decay_mask();
    let mut opt = AdamW::new(model.params(), cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = TrainLog {
        schedule: schedule.clone(),
        steps_per_epoch,
        ..TrainLog::default()
    };

    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let ratios: Vec<f64> = match &schedule {
                Some(s) => prune_layers.iter().map(|&l| anneal_ratio(step, s, l)).collect(),
                None => Vec::new(),
            };
            let lr = learning_rate(step, total_steps, cfg);
            let scale = 1.0 / batch.len() as f64;
            let frozen: &Model = model;
            let results = par::try_map(batch, cfg.execution, |&i| {
                let soft = soft_targets.as_ref().map(|s| s[i].as_slice());
                example_gradient(frozen, &data[i], &ratios, soft, scale)
            });
            let results = results.map_err(|e| match e {
                EatError::NonFinite(_) => EatError::Divergence { step, loss: f64::NAN },
                other => other,
            })?;

            let mut grads: Vec<Matrix> = model.params().iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
            let mut batch_loss = 0.0;
            for r in results {
                batch_loss += r.loss;
                correct += r.correct as usize;
                for (acc, g) in grads.iter_mut().zip(r.grads) {
                    if let Some(g) = g {
                        acc.add_assign(&g);
                    }
                }
            }
            let batch_loss = batch_loss * scale;
            if !batch_loss.is_finite() {
                return Err(EatError::Divergence { step, loss: batch_loss });
            }
            loss_sum += batch_loss * batch.len() as f64;
            let grad_norm = clip_global_norm(&mut grads, cfg.grad_clip);
            opt.step(model.params_mut(), &grads, &decay, lr);
            debug!("step {step} loss {batch_loss:.4} grad-norm {grad_norm:.3} lr {lr:.2e}");

            log.steps.push(StepRecord {
                step,
                epoch,
                loss: batch_loss,
                lr,
                ratios: prune_layers.iter().zip(&ratios).map(|(l, r)| (format!("p_{l}"), *r)).collect(),
            });
            step += 1;
        }
        let summary = EpochSummary {
            epoch,
            mean_loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
        };
        info!(
            "epoch {epoch}: mean loss {:.4}, train accuracy {:.3}",
            summary.mean_loss, summary.accuracy
        );
        log.epochs.push(summary);
    }
    Ok(log)
}

/// Result of [`fit`]: the trained model, its log and the teacher if one
/// was trained for distillation.
pub struct Fitted {
    pub model: Model,
    pub log: TrainLog,
    pub teacher: Option<Model>,
}

/// Initializes and trains a model; when `config.mu > 0` a dense teacher is
/// trained first on the same data.
pub fn fit(config: ModelConfig, data: &[Example], cfg: &TrainConfig) -> Result<Fitted> {
    let teacher = if config.mu > 0.0 {
        let mut t = Model::new(config.teacher(), cfg.seed ^ 0x7eac)?;
        let tcfg = TrainConfig {
            epochs: cfg.teacher_epochs,
            ..cfg.clone()
        };
        info!("training distillation teacher");
        train(&mut t, data, &tcfg, None)?;
        Some(t)
    } else {
        None
    };
    let mut model = Model::new(config, cfg.seed)?;
    let log = train(&mut model, data, cfg, teacher.as_ref())?;
    Ok(Fitted { model, log, teacher })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn learning_rate_shape() {
        let cfg = TrainConfig {
            learning_rate: 1.0,
            warmup_fraction: 0.1,
            ..TrainConfig::default()
        };
        let lrs: Vec<f64> = (0..100).map(|s| learning_rate(s, 100, &cfg)).collect();
        assert!((lrs[9] - 1.0).abs() < 1e-12);
        assert!(lrs[..10].windows(2).all(|w| w[0] < w[1]));
        assert!(lrs[10..].windows(2).all(|w| w[0] >= w[1]));
        assert!(lrs.iter().all(|&l| l > 0.0));
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut params = vec![Matrix::filled(1, 2, 1.0f32)];
        let mut opt = AdamW::new(&params, &cfg);
        opt.step(&mut params, &[Matrix::from_vec(1, 2, vec![0.5, -2.0]).unwrap()], &[true], 0.1);
        assert!((params[0].get(0, 0) - 0.9).abs() < 1e-5);
        assert!((params[0].get(0, 1) - 1.1).abs() < 1e-5);
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient() {
        let cfg = TrainConfig {
            weight_decay: 0.5,
            ..TrainConfig::default()
        };
        let mut params = vec![Matrix::filled(1, 1, 2.0f32), Matrix::filled(1, 1, 2.0f32)];
        let mut opt = AdamW::new(&params, &cfg);
        let zero = vec![Matrix::zeros(1, 1), Matrix::zeros(1, 1)];
        opt.step(&mut params, &zero, &[true, false], 0.1);
        assert!((params[0].get(0, 0) - 1.9).abs() < 1e-6);
        assert_eq!(params[1].get(0, 0), 2.0);
    }
}
