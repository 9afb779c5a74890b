//! Training objective: weighted cross-entropy over the exit heads plus an
//! optional temperature-scaled distillation term on the final head.

use super::config::ModelConfig;
use super::model::GraphForward;
use crate::error::{EatError, Result};
use crate::tensor::{softmax, Graph, Matrix, NodeId, Scalar};

pub fn cross_entropy(probs: &[f64], label: usize) -> f64 {
    -probs[label].ln()
}

/// `Σ λ_ℓ · CE_ℓ`; `per_exit_probs` follows `ModelConfig::exit_heads` order.
pub fn classification_loss(per_exit_probs: &[Vec<f64>], label: usize, config: &ModelConfig) -> Result<f64> {
    let heads = config.exit_heads();
    if heads.len() != per_exit_probs.len() {
        return Err(EatError::invalid(format!(
            "expected {} exit distributions, got {}",
            heads.len(),
            per_exit_probs.len()
        )));
    }
    Ok(heads
        .iter()
        .zip(per_exit_probs)
        .map(|(&(_, lambda), probs)| lambda * cross_entropy(probs, label))
        .sum())
}

/// `μ · T² · KL(softmax(teacher/T) ‖ softmax(student/T))`.
pub fn distillation_loss(teacher_logits: &[f64], student_logits: &[f64], temperature: f64, mu: f64) -> Result<f64> {
    if teacher_logits.len() != student_logits.len() || temperature.is_nan() || temperature <= 0.0 {
        return Err(EatError::invalid("distillation needs matching logits and a positive temperature"));
    }
    let scaled = |z: &[f64]| z.iter().map(|v| v / temperature).collect::<Vec<_>>();
    let p = softmax(&scaled(teacher_logits));
    let log_q = log_softmax(&scaled(student_logits));
    let kl: f64 = p
        .iter()
        .zip(&log_q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, lq)| pi * (pi.ln() - lq))
        .sum();
    Ok(mu * temperature * temperature * kl.max(0.0))
}

pub fn total_loss(classification: f64, distillation: f64) -> f64 {
    classification + distillation
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// Loss node for one example. `teacher_logits` enables the distillation term
/// when `config.mu > 0`.
pub fn loss_on_graph<T: Scalar>(
    config: &ModelConfig,
    g: &mut Graph<'_, T>,
    forward: &GraphForward,
    label: usize,
    teacher_logits: Option<&[f64]>,
) -> Result<NodeId> {
    let heads = config.exit_heads();
    let mut terms = Vec::with_capacity(heads.len() + 1);
    for (&(_, lambda), &(_, logits)) in heads.iter().zip(&forward.logits) {
        let log_p = g.log_softmax_rows(logits)?;
        let picked = g.pick(log_p, 0, label)?;
        terms.push(g.scale(picked, -lambda)?);
    }
    if let (Some(teacher), true) = (teacher_logits, config.mu > 0.0) {
        let temp = config.distill_temperature;
        let &(_, student) = forward.logits.last().ok_or_else(|| EatError::invalid("model has no heads"))?;
        let p: Vec<f64> = softmax(&teacher.iter().map(|v| v / temp).collect::<Vec<_>>());
        let weight = config.mu * temp * temp;
        // KL = Σ p log p − Σ p log q; the first sum is constant.
        let entropy_term: f64 = p.iter().filter(|&&pi| pi > 0.0).map(|pi| pi * pi.ln()).sum();
        let scaled = g.scale(student, 1.0 / temp)?;
        let log_q = g.log_softmax_rows(scaled)?;
        let p_node = g.constant(Matrix::row_vector(p.iter().map(|&v| T::of(v)).collect()));
        let cross = g.mul(p_node, log_q)?;
        let cross = g.sum(cross)?;
        terms.push(g.scale(cross, -weight)?);
        terms.push(g.constant(Matrix::filled(1, 1, T::of(weight * entropy_term))));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(total)
}
