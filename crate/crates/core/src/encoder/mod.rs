//! The adaptive encoder: model definition, objective and training loop.

mod config;
mod loss;
mod model;
mod train;

pub use config::{AttentionKind, ModelConfig, TrainConfig};
pub use loss::{classification_loss, cross_entropy, distillation_loss, loss_on_graph, total_loss};
pub use model::{
    forward_on_graph, retention_fraction, target_ratios, ComponentTimes, ExitRecord, ForwardTrace, GraphForward, Model,
};
pub use train::{fit, learning_rate, teacher_logits, train, AdamW, EpochSummary, Fitted, StepRecord, TrainLog};
