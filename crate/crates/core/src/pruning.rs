//! Progressive token pruning by hidden-state L2 norm.
//!
//! After each scheduled layer the lowest-scoring fraction `p` of non-CLS
//! tokens is dropped. CLS is always kept and survivors stay in their
//! original relative order.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{EatError, Result};
use crate::tensor::{Matrix, Scalar};

// Guards the ceiling against products like 0.7 * 100 = 70.00000000000001.
const CEIL_SLACK: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    /// 1-based layers after which pruning is applied, strictly increasing.
    pub layers: Vec<usize>,
    pub target_ratio: f64,
    pub anneal_start_step: usize,
    pub anneal_end_step: usize,
}

impl PruneSchedule {
    pub fn new(layers: Vec<usize>, target_ratio: f64, anneal_start_step: usize, anneal_end_step: usize) -> Result<Self> {
        let schedule = PruneSchedule {
            layers,
            target_ratio,
            anneal_start_step,
            anneal_end_step,
        };
        schedule.validate()?;
        Ok(schedule)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.target_ratio) {
            return Err(EatError::invalid(format!(
                "pruning ratio must lie in [0, 1), got {}",
                self.target_ratio
            )));
        }
        if self.anneal_start_step > self.anneal_end_step {
            return Err(EatError::invalid("anneal start is after anneal end"));
        }
        if self.layers.windows(2).any(|w| w[0] >= w[1]) || self.layers.first() == Some(&0) {
            return Err(EatError::invalid("prune layers must be positive and strictly increasing"));
        }
        Ok(())
    }

    /// Two-stage schedule: no pruning during the first epoch, then a linear
    /// ramp that reaches the target on the final training step.
    pub fn two_stage(layers: Vec<usize>, target_ratio: f64, steps_per_epoch: usize, epochs: usize) -> Result<Self> {
        let total = steps_per_epoch * epochs;
        let start = steps_per_epoch.min(total);
        let end = total.saturating_sub(1).max(start);
        PruneSchedule::new(layers, target_ratio, start, end)
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.layers.contains(&layer)
    }
}

/// Pruning ratio in effect at `step` for `layer`. Zero for layers that are
/// not scheduled.
pub fn anneal_ratio(step: usize, schedule: &PruneSchedule, layer: usize) -> f64 {
    if !schedule.contains(layer) || step <= schedule.anneal_start_step {
        return 0.0;
    }
    if step >= schedule.anneal_end_step {
        return schedule.target_ratio;
    }
    let span = (schedule.anneal_end_step - schedule.anneal_start_step) as f64;
    schedule.target_ratio * (step - schedule.anneal_start_step) as f64 / span
}

/// L2 norm of every row.
pub fn importance_scores<T: Scalar>(h: &Matrix<T>) -> Vec<f64> {
    (0..h.rows())
        .map(|r| h.row(r).iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt())
        .collect()
}

/// Number of non-CLS tokens kept out of `others` at ratio `p`.
pub fn kept_count(others: usize, p: f64) -> usize {
    let raw = ((1.0 - p) * others as f64 - CEIL_SLACK).ceil();
    (raw.max(0.0) as usize).min(others)
}

/// Positions to keep: CLS plus the `⌈(1-p)(t-1)⌉` highest-scoring others,
/// returned in ascending order. Ties keep the lower position.
pub fn select_kept(scores: &[f64], p: f64, cls_index: usize) -> Vec<usize> {
    let t = scores.len();
    if t == 0 {
        return Vec::new();
    }
    let mut others: Vec<usize> = (0..t).filter(|&i| i != cls_index).collect();
    let keep = kept_count(others.len(), p.clamp(0.0, 1.0));
    others.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = others.into_iter().take(keep).collect();
    if cls_index < t {
        kept.push(cls_index);
    }
    kept.sort_unstable();
    kept
}

/// Hidden states of the surviving tokens and where they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerState<T = f32> {
    pub h: Matrix<T>,
    pub kept_original_indices: Vec<usize>,
    pub layer_index: usize,
}

impl<T: Scalar> LayerState<T> {
    pub fn new(h: Matrix<T>, layer_index: usize) -> Self {
        let kept_original_indices = (0..h.rows()).collect();
        LayerState {
            h,
            kept_original_indices,
            layer_index,
        }
    }

    pub fn tokens(&self) -> usize {
        self.h.rows()
    }
}

/// Maps positions in the current (compacted) order back to input positions.
pub fn compose_indices(current: &[usize], kept: &[usize]) -> Result<Vec<usize>> {
    kept.iter()
        .map(|&p| {
            current.get(p).copied().ok_or_else(|| {
                EatError::invalid(format!("kept position {p} out of range for {} tokens", current.len()))
            })
        })
        .collect()
}

/// Gathers the kept rows. `kept` indexes the current state and must contain
/// CLS (position 0).
pub fn apply_pruning<T: Scalar>(state: &LayerState<T>, kept: &[usize]) -> Result<LayerState<T>> {
    if !kept.contains(&0) {
        return Err(EatError::invalid("pruning would drop the CLS token"));
    }
    if kept.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EatError::invalid("kept positions must be strictly increasing"));
    }
    Ok(LayerState {
        h: state.h.gather_rows(kept)?,
        kept_original_indices: compose_indices(&state.kept_original_indices, kept)?,
        layer_index: state.layer_index,
    })
}
