use serde::{Deserialize, Serialize};

use crate::error::{EatError, Result};
use crate::par::Execution;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    #[default]
    Sparse,
    Dense,
}

/// Architecture and objective hyperparameters. Layer indices are 1-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    /// Total attention window (half on each side); must be even.
    pub window: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
    /// Longest accepted input, CLS included.
    pub max_seq_len: usize,
    pub attention: AttentionKind,

    /// Layer whose output feeds the early-exit head.
    pub exit_layer: usize,
    pub early_exit: bool,
    /// Adds a head one layer below the exit layer, needed by the patience gate.
    pub patience_head: bool,
    pub lambda_aux: f64,
    pub lambda_exit: f64,
    pub lambda_final: f64,

    pub pruning: bool,
    pub prune_layers: Vec<usize>,
    pub prune_ratio: f64,

    pub mu: f64,
    pub distill_temperature: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 6,
            d_model: 64,
            d_ff: 128,
            heads: 4,
            window: 8,
            vocab_size: 1000,
            num_classes: 2,
            max_seq_len: 128,
            attention: AttentionKind::Sparse,
            exit_layer: 4,
            early_exit: true,
            patience_head: false,
            lambda_aux: 0.1,
            lambda_exit: 0.3,
            lambda_final: 1.0,
            pruning: true,
            prune_layers: vec![2, 4],
            prune_ratio: 0.3,
            mu: 0.0,
            distill_temperature: 2.0,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    /// Full-size width (768 wide, 12 heads, 30522-token vocabulary) and window.
    pub fn full_scale() -> Self {
        ModelConfig {
            d_model: 768,
            d_ff: 3072,
            heads: 12,
            window: 32,
            vocab_size: 30522,
            max_seq_len: 512,
            ..ModelConfig::default()
        }
    }

    /// The distillation teacher: same family, dense attention, no pruning,
    /// no early exit and no distillation of its own.
    pub fn teacher(&self) -> Self {
        ModelConfig {
            attention: AttentionKind::Dense,
            pruning: false,
            early_exit: false,
            mu: 0.0,
            ..self.clone()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn aux_layer(&self) -> Option<usize> {
        self.patience_head.then(|| self.exit_layer - 1)
    }

    /// Layers carrying a classifier, ascending, with their loss weights.
    pub fn exit_heads(&self) -> Vec<(usize, f64)> {
        let mut heads = Vec::new();
        if let Some(aux) = self.aux_layer() {
            heads.push((aux, self.lambda_aux));
        }
        if self.exit_layer < self.layers {
            heads.push((self.exit_layer, self.lambda_exit));
        }
        heads.push((self.layers, self.lambda_final));
        heads
    }

    /// Layers after which pruning runs, empty when pruning is off.
    pub fn active_prune_layers(&self) -> &[usize] {
        if self.pruning {
            &self.prune_layers
        } else {
            &[]
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(EatError::InvalidArgument(msg));
        if self.layers == 0 || self.d_model == 0 || self.d_ff == 0 || self.num_classes < 2 {
            return bad("layers, widths and class count must be positive (at least two classes)".into());
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if !self.window.is_multiple_of(2) {
            return bad(format!("window {} must be even", self.window));
        }
        if self.max_seq_len == 0 || self.vocab_size < 2 {
            return bad("max_seq_len and vocab_size must be positive".into());
        }
        if self.exit_layer == 0 || self.exit_layer > self.layers {
            return bad(format!("exit layer {} outside 1..={}", self.exit_layer, self.layers));
        }
        if self.patience_head && self.exit_layer < 2 {
            return bad("patience head needs an exit layer of at least 2".into());
        }
        for (name, v) in [
            ("lambda_aux", self.lambda_aux),
            ("lambda_exit", self.lambda_exit),
            ("lambda_final", self.lambda_final),
            ("mu", self.mu),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a nonnegative number, got {v}"));
            }
        }
        if self.distill_temperature.is_nan() || self.distill_temperature <= 0.0 {
            return bad("distillation temperature must be positive".into());
        }
        if !(0.0..1.0).contains(&self.prune_ratio) {
            return bad(format!("prune ratio {} outside [0, 1)", self.prune_ratio));
        }
        if !self.prune_layers.windows(2).all(|w| w[0] < w[1])
            || self.prune_layers.iter().any(|&l| l == 0 || l >= self.layers)
        {
            return bad(format!(
                "prune layers {:?} must be strictly increasing within 1..{}",
                self.prune_layers, self.layers
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Epochs for the distillation teacher, when one is trained.
    pub teacher_epochs: usize,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 3,
            batch_size: 32,
            learning_rate: 3e-3,
            weight_decay: 0.01,
            warmup_fraction: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            seed: 7,
            teacher_epochs: 3,
            execution: Execution::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(EatError::invalid("epochs and batch size must be positive"));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 || self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(EatError::invalid("learning rate must be positive, weight decay nonnegative, warmup in [0, 1)"));
        }
        Ok(())
    }
}
