use std::path::Path;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::{AttentionKind, ModelConfig};
use crate::attention::{attend, attend_on_graph, build_sparse_mask, count_allowed_pairs, AttentionNodes, AttentionParams, SparseMask};
use crate::data::CLS_ID;
use crate::error::{EatError, Result};
use crate::exits::{argmax, exit_decision, patience_decision, ExitPolicy, GateMode};
use crate::pruning::{apply_pruning, importance_scores, select_kept, LayerState};
use crate::tensor::{load_checkpoint, save_checkpoint, softmax, Checkpoint, Graph, Matrix, NodeId, Scalar, LAYER_NORM_EPS};

const EMBED_PARAMS: usize = 4;
const LAYER_PARAMS: usize = 16;
const LAYER_NAMES: [&str; LAYER_PARAMS] = [
    "w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o", "ln1_g", "ln1_b", "w_1", "b_1", "w_2", "b_2", "ln2_g", "ln2_b",
];

// Offsets inside one layer's parameter block.
const W_Q: usize = 0;
const LN1_G: usize = 8;
const LN1_B: usize = 9;
const W_1: usize = 10;
const B_1: usize = 11;
const W_2: usize = 12;
const B_2: usize = 13;
const LN2_G: usize = 14;
const LN2_B: usize = 15;

const TOK_EMB: usize = 0;
const POS_EMB: usize = 1;
const EMB_G: usize = 2;
const EMB_B: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ParamKind {
    Embedding,
    Weight,
    Bias,
    NormGain,
}

struct ParamSpec {
    name: String,
    rows: usize,
    cols: usize,
    kind: ParamKind,
}

fn layout(config: &ModelConfig) -> Vec<ParamSpec> {
    let (d, f, c) = (config.d_model, config.d_ff, config.num_classes);
    let spec = |name: String, rows, cols, kind| ParamSpec { name, rows, cols, kind };
    let mut out = vec![
        spec("tok_emb".into(), config.vocab_size, d, ParamKind::Embedding),
        spec("pos_emb".into(), config.max_seq_len, d, ParamKind::Embedding),
        spec("emb_ln_g".into(), 1, d, ParamKind::NormGain),
        spec("emb_ln_b".into(), 1, d, ParamKind::Bias),
    ];
    for l in 1..=config.layers {
        for (i, name) in LAYER_NAMES.iter().enumerate() {
            let (rows, cols, kind) = match i {
                0 | 2 | 4 | 6 => (d, d, ParamKind::Weight),
                W_1 => (d, f, ParamKind::Weight),
                B_1 => (1, f, ParamKind::Bias),
                W_2 => (f, d, ParamKind::Weight),
                LN1_G | LN2_G => (1, d, ParamKind::NormGain),
                _ => (1, d, ParamKind::Bias),
            };
            out.push(spec(format!("layer{l}.{name}"), rows, cols, kind));
        }
    }
    for (layer, _) in config.exit_heads() {
        out.push(spec(format!("head{layer}.w"), d, c, ParamKind::Weight));
        out.push(spec(format!("head{layer}.b"), 1, c, ParamKind::Bias));
    }
    out
}

fn layer_param(layer: usize, offset: usize) -> usize {
    EMBED_PARAMS + (layer - 1) * LAYER_PARAMS + offset
}

/// One classifier's output for one example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitRecord {
    pub layer: usize,
    pub logits: Vec<f64>,
    /// Softmax of the logits, at the calibration temperature for the exit head.
    pub probs: Vec<f64>,
}

/// What one forward pass actually executed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardTrace {
    /// Layer whose head produced the prediction.
    pub exit_layer: usize,
    /// Tokens (CLS included) entering each executed layer.
    pub token_counts: Vec<usize>,
    /// Attention pairs evaluated by each executed layer.
    pub allowed_pairs: Vec<usize>,
    /// Fraction of non-CLS input tokens still present at the exit layer.
    pub retention: f64,
    pub exits: Vec<ExitRecord>,
    /// Input positions surviving to the exit layer.
    pub kept_indices: Vec<usize>,
    pub prediction: usize,
}

impl ForwardTrace {
    pub fn exit(&self, layer: usize) -> Option<&ExitRecord> {
        self.exits.iter().find(|e| e.layer == layer)
    }

    pub fn input_tokens(&self) -> usize {
        self.token_counts[0]
    }
}

pub fn retention_fraction(input_tokens: usize, surviving_tokens: usize) -> f64 {
    if input_tokens <= 1 {
        1.0
    } else {
        (surviving_tokens - 1) as f64 / (input_tokens - 1) as f64
    }
}

/// Wall-clock spent in each part of inference, summed over calls.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ComponentTimes {
    pub attention: Duration,
    pub ffn: Duration,
    pub pruning: Duration,
    pub exit_heads: Duration,
}

impl ComponentTimes {
    pub fn add(&mut self, other: &ComponentTimes) {
        self.attention += other.attention;
        self.ffn += other.ffn;
        self.pruning += other.pruning;
        self.exit_heads += other.exit_heads;
    }
}

fn timed<R>(slot: &mut Option<&mut ComponentTimes>, pick: fn(&mut ComponentTimes) -> &mut Duration, f: impl FnOnce() -> R) -> R {
    match slot {
        Some(times) => {
            let start = Instant::now();
            let out = f();
            *pick(times) += start.elapsed();
            out
        }
        None => f(),
    }
}

/// Per-prune-layer ratios, aligned with `ModelConfig::active_prune_layers`.
pub fn target_ratios(config: &ModelConfig) -> Vec<f64> {
    vec![config.prune_ratio; config.active_prune_layers().len()]
}

fn ratio_after(config: &ModelConfig, ratios: &[f64], layer: usize) -> Option<f64> {
    config
        .active_prune_layers()
        .iter()
        .position(|&l| l == layer)
        .map(|i| ratios.get(i).copied().unwrap_or(0.0))
}

fn mask_for(config: &ModelConfig, t: usize) -> Result<SparseMask> {
    match config.attention {
        AttentionKind::Sparse => build_sparse_mask(t, config.window, 0),
        AttentionKind::Dense => Ok(SparseMask::dense(t)),
    }
}

/// Graph outputs of a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct GraphForward {
    /// Logits node of every head, in `ModelConfig::exit_heads` order.
    pub logits: Vec<(usize, NodeId)>,
    pub token_counts: Vec<usize>,
    pub kept_indices: Vec<usize>,
}

/// Encoder parameters plus the configuration that shapes them.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar = f32> {
    config: ModelConfig,
    params: Vec<Matrix<T>>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, config.init_std).map_err(|e| EatError::invalid(e.to_string()))?;
        let params = layout(&config)
            .iter()
            .map(|p| match p.kind {
                ParamKind::Embedding | ParamKind::Weight => {
                    Matrix::from_fn(p.rows, p.cols, |_, _| T::of(normal.sample(&mut rng)))
                }
                ParamKind::Bias => Matrix::zeros(p.rows, p.cols),
                ParamKind::NormGain => Matrix::filled(p.rows, p.cols, T::one()),
            })
            .collect();
        Ok(Model { config, params })
    }

    pub fn from_params(config: ModelConfig, params: Vec<Matrix<T>>) -> Result<Self> {
        config.validate()?;
        let specs = layout(&config);
        if specs.len() != params.len() {
            return Err(EatError::invalid(format!("expected {} tensors, got {}", specs.len(), params.len())));
        }
        for (s, p) in specs.iter().zip(&params) {
            if p.shape() != (s.rows, s.cols) {
                return Err(EatError::Shape {
                    op: "parameter load",
                    lhs: (s.rows, s.cols),
                    rhs: p.shape(),
                });
            }
        }
        Ok(Model { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Matrix<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Matrix<T>] {
        &mut self.params
    }

    pub fn param_names(&self) -> Vec<String> {
        layout(&self.config).into_iter().map(|p| p.name).collect()
    }

    /// Whether weight decay applies to each parameter (not to biases or norms).
    pub fn decay_mask(&self) -> Vec<bool> {
        layout(&self.config)
            .iter()
            .map(|p| matches!(p.kind, ParamKind::Weight | ParamKind::Embedding))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.data().len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.iter().map(Matrix::cast).collect(),
        }
    }

    fn validate_input(&self, ids: &[u32]) -> Result<()> {
        if ids.is_empty() {
            return Err(EatError::invalid("empty input"));
        }
        if ids.len() > self.config.max_seq_len {
            return Err(EatError::invalid(format!(
                "input of {} tokens exceeds max_seq_len {}",
                ids.len(),
                self.config.max_seq_len
            )));
        }
        if ids[0] != CLS_ID {
            return Err(EatError::invalid("input must start with the CLS token"));
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(EatError::UnknownToken {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn attention_params(&self, layer: usize) -> AttentionParams<T> {
        let p = |o: usize| self.params[layer_param(layer, W_Q + o)].clone();
        AttentionParams {
            w_q: p(0),
            b_q: p(1),
            w_k: p(2),
            b_k: p(3),
            w_v: p(4),
            b_v: p(5),
            w_o: p(6),
            b_o: p(7),
            heads: self.config.heads,
        }
    }

    fn head_logits(&self, head: usize, h: &Matrix<T>) -> Result<Vec<f64>> {
        let base = EMBED_PARAMS + self.config.layers * LAYER_PARAMS + 2 * head;
        let cls = Matrix::row_vector(h.row(0).to_vec());
        let logits = cls.matmul(&self.params[base])?.add_row(&self.params[base + 1])?;
        if !logits.is_finite() {
            return Err(EatError::NonFinite("classifier logits"));
        }
        Ok(logits.data().iter().map(|v| v.as_f64()).collect())
    }

    fn embed(&self, ids: &[u32]) -> Result<Matrix<T>> {
        let tok: Vec<usize> = ids.iter().map(|&id| id as usize).collect();
        let pos: Vec<usize> = (0..ids.len()).collect();
        let x = self.params[TOK_EMB].gather_rows(&tok)?.add(&self.params[POS_EMB].gather_rows(&pos)?)?;
        x.layer_norm(&self.params[EMB_G], &self.params[EMB_B], LAYER_NORM_EPS)
    }

    fn layer(&self, layer: usize, h: &Matrix<T>, mask: &SparseMask, times: &mut Option<&mut ComponentTimes>) -> Result<Matrix<T>> {
        let p = |o: usize| &self.params[layer_param(layer, o)];
        let attn = timed(times, |t| &mut t.attention, || attend(h, &self.attention_params(layer), mask))?;
        timed(times, |t| &mut t.ffn, || {
            let h1 = h.add(&attn)?.layer_norm(p(LN1_G), p(LN1_B), LAYER_NORM_EPS)?;
            let f = h1.matmul(p(W_1))?.add_row(p(B_1))?.gelu().matmul(p(W_2))?.add_row(p(B_2))?;
            let out = h1.add(&f)?.layer_norm(p(LN2_G), p(LN2_B), LAYER_NORM_EPS)?;
            if out.is_finite() {
                Ok(out)
            } else {
                Err(EatError::NonFinite("encoder layer"))
            }
        })
    }

    /// Inference at the configured pruning ratio. With a policy (and early
    /// exit enabled) evaluation stops at the exit layer once the gate fires.
    pub fn forward(&self, ids: &[u32], policy: Option<&ExitPolicy>) -> Result<ForwardTrace> {
        self.forward_with(ids, &target_ratios(&self.config), policy, None)
    }

    /// Returns the predicted label and the trace.
    pub fn predict_adaptive(&self, ids: &[u32], policy: &ExitPolicy) -> Result<(usize, ForwardTrace)> {
        let trace = self.forward(ids, Some(policy))?;
        Ok((trace.prediction, trace))
    }

    pub fn forward_with(
        &self,
        ids: &[u32],
        ratios: &[f64],
        policy: Option<&ExitPolicy>,
        mut times: Option<&mut ComponentTimes>,
    ) -> Result<ForwardTrace> {
        self.validate_input(ids)?;
        let cfg = &self.config;
        if let Some(p) = policy {
            p.validate()?;
            if p.mode == GateMode::Patience && cfg.early_exit && !cfg.patience_head {
                return Err(EatError::invalid("patience gating needs a model trained with patience_head"));
            }
        }
        let gate = policy.filter(|_| cfg.early_exit && cfg.exit_layer < cfg.layers);
        let heads = cfg.exit_heads();

        let mut state = LayerState::new(self.embed(ids)?, 0);
        let mut token_counts = Vec::with_capacity(cfg.layers);
        let mut allowed_pairs = Vec::with_capacity(cfg.layers);
        let mut exits: Vec<ExitRecord> = Vec::with_capacity(heads.len());
        let mut cached_mask: Option<SparseMask> = None;

        for layer in 1..=cfg.layers {
            let t = state.tokens();
            let mask = match cached_mask.take() {
                Some(m) if m.len() == t => m,
                _ => mask_for(cfg, t)?,
            };
            token_counts.push(t);
            allowed_pairs.push(count_allowed_pairs(&mask));
            state.h = self.layer(layer, &state.h, &mask, &mut times)?;
            state.layer_index = layer;
            cached_mask = Some(mask);

            if let Some(head) = heads.iter().position(|&(l, _)| l == layer) {
                let temperature = match gate {
                    Some(p) if layer == cfg.exit_layer => p.calibration_temperature,
                    _ => 1.0,
                };
                let logits = timed(&mut times, |t| &mut t.exit_heads, || self.head_logits(head, &state.h))?;
                let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
                exits.push(ExitRecord {
                    layer,
                    probs: softmax(&scaled),
                    logits,
                });
                if let (Some(p), true) = (gate, layer == cfg.exit_layer) {
                    let here = exits.last().expect("just pushed");
                    let fire = timed(&mut times, |t| &mut t.exit_heads, || match p.mode {
                        GateMode::Threshold => exit_decision(&here.probs, p),
                        GateMode::Patience => {
                            let aux = exits.iter().find(|e| Some(e.layer) == cfg.aux_layer());
                            let aux = aux.map(|e| argmax(&e.logits)).unwrap_or(usize::MAX);
                            patience_decision(aux, argmax(&here.logits), &here.probs, p)
                        }
                    })?;
                    if fire {
                        break;
                    }
                }
            }

            if let Some(p) = ratio_after(cfg, ratios, layer) {
                state = timed(&mut times, |t| &mut t.pruning, || {
                    let kept = select_kept(&importance_scores(&state.h), p, 0);
                    apply_pruning(&state, &kept)
                })?;
            }
        }

        let last = exits.last().ok_or(EatError::NonFinite("missing classifier output"))?;
        let exit_layer = last.layer;
        let prediction = argmax(&last.logits);
        let surviving = token_counts[exit_layer - 1];
        Ok(ForwardTrace {
            exit_layer,
            retention: retention_fraction(ids.len(), surviving),
            token_counts,
            allowed_pairs,
            kept_indices: state.kept_original_indices,
            exits,
            prediction,
        })
    }

    pub fn to_checkpoint(&self, extra_meta: serde_json::Value) -> Result<Checkpoint> {
        let tensors = self
            .param_names()
            .into_iter()
            .zip(&self.params)
            .map(|(n, p)| (n, p.cast::<f32>()))
            .collect();
        Ok(Checkpoint {
            meta: serde_json::json!({ "model": self.config, "extra": extra_meta }),
            tensors,
        })
    }

    pub fn from_checkpoint(checkpoint: &Checkpoint) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(
            checkpoint
                .meta
                .get("model")
                .cloned()
                .ok_or_else(|| EatError::Checkpoint("missing model config".into()))?,
        )?;
        let names = layout(&config);
        for (spec, (name, _)) in names.iter().zip(&checkpoint.tensors) {
            if &spec.name != name {
                return Err(EatError::Checkpoint(format!("expected tensor {}, found {name}", spec.name)));
            }
        }
        let params = checkpoint.tensors.iter().map(|(_, m)| m.cast()).collect();
        Model::from_params(config, params)
    }

    pub fn save(&self, path: &Path, extra_meta: serde_json::Value) -> Result<()> {
        save_checkpoint(path, &self.to_checkpoint(extra_meta)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&load_checkpoint(path)?)
    }
}

/// Training-mode forward pass on an autodiff graph whose parameter store has
/// the layout of a [`Model`] built from `config`. Every head is evaluated
/// and pruning runs at `ratios`.
pub fn forward_on_graph<T: Scalar>(
    config: &ModelConfig,
    g: &mut Graph<'_, T>,
    ids: &[u32],
    ratios: &[f64],
) -> Result<GraphForward> {
    let tok: Vec<usize> = ids.iter().map(|&id| id as usize).collect();
    let pos: Vec<usize> = (0..ids.len()).collect();
    let tok_emb = g.param(TOK_EMB);
    let pos_emb = g.param(POS_EMB);
    let x = g.gather_rows(tok_emb, &tok)?;
    let p = g.gather_rows(pos_emb, &pos)?;
    let x = g.add(x, p)?;
    let (eg, eb) = (g.param(EMB_G), g.param(EMB_B));
    let mut h = g.layer_norm(x, eg, eb, LAYER_NORM_EPS)?;

    let heads = config.exit_heads();
    let mut kept_indices: Vec<usize> = pos;
    let mut token_counts = Vec::with_capacity(config.layers);
    let mut logits = Vec::with_capacity(heads.len());

    for layer in 1..=config.layers {
        let t = g.value(h).rows();
        token_counts.push(t);
        let mask = mask_for(config, t)?;
        let id = |g: &mut Graph<'_, T>, o: usize| g.param(layer_param(layer, o));
        let nodes = AttentionNodes {
            w_q: id(g, 0),
            b_q: id(g, 1),
            w_k: id(g, 2),
            b_k: id(g, 3),
            w_v: id(g, 4),
            b_v: id(g, 5),
            w_o: id(g, 6),
            b_o: id(g, 7),
        };
        let attn = attend_on_graph(g, h, &nodes, config.heads, &mask)?;
        let r = g.add(h, attn)?;
        let (g1, b1) = (id(g, LN1_G), id(g, LN1_B));
        let h1 = g.layer_norm(r, g1, b1, LAYER_NORM_EPS)?;
        let (w1, bb1, w2, bb2) = (id(g, W_1), id(g, B_1), id(g, W_2), id(g, B_2));
        let f = g.matmul(h1, w1)?;
        let f = g.add_row(f, bb1)?;
        let f = g.gelu(f)?;
        let f = g.matmul(f, w2)?;
        let f = g.add_row(f, bb2)?;
        let r = g.add(h1, f)?;
        let (g2, b2) = (id(g, LN2_G), id(g, LN2_B));
        h = g.layer_norm(r, g2, b2, LAYER_NORM_EPS)?;

        if let Some(head) = heads.iter().position(|&(l, _)| l == layer) {
            let base = EMBED_PARAMS + config.layers * LAYER_PARAMS + 2 * head;
            let cls = g.gather_rows(h, &[0])?;
            let (w, b) = (g.param(base), g.param(base + 1));
            let z = g.matmul(cls, w)?;
            logits.push((layer, g.add_row(z, b)?));
        }

        if let Some(ratio) = ratio_after(config, ratios, layer) {
            let kept = select_kept(&importance_scores(g.value(h)), ratio, 0);
            kept_indices = kept.iter().map(|&k| kept_indices[k]).collect();
            h = g.gather_rows(h, &kept)?;
        }
    }
    Ok(GraphForward {
        logits,
        token_counts,
        kept_indices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gelu;

    fn tiny(layers: usize, d: usize) -> ModelConfig {
        ModelConfig {
            layers,
            d_model: d,
            d_ff: 2 * d,
            heads: 2,
            window: 2,
            vocab_size: 30,
            max_seq_len: 128,
            exit_layer: layers.clamp(1, 4),
            prune_layers: vec![],
            init_std: 0.3,
            ..ModelConfig::default()
        }
    }

    fn ids(n: usize) -> Vec<u32> {
        std::iter::once(CLS_ID).chain((1..n).map(|i| 2 + (i * 7 % 27) as u32)).collect()
    }

    #[test]
    fn retention_counts_follow_ceiling_arithmetic() {
        let cfg = ModelConfig {
            d_model: 16,
            d_ff: 32,
            vocab_size: 50,
            ..ModelConfig::default()
        };
        let model = Model::<f32>::new(cfg, 1).unwrap();
        let trace = model.forward(&ids(101), None).unwrap();
        assert_eq!(trace.token_counts, vec![101, 101, 71, 71, 50, 50]);
        assert_eq!(trace.exit_layer, 6);
        assert!((trace.retention - 0.49).abs() < 1e-12);
        assert_eq!(trace.kept_indices.len(), 50);
        assert_eq!(trace.kept_indices[0], 0);
    }

    #[test]
    fn invalid_inputs() {
        let model = Model::<f32>::new(tiny(2, 8), 0).unwrap();
        assert!(model.forward(&[], None).is_err());
        assert!(matches!(model.forward(&[0, 99], None), Err(EatError::UnknownToken { id: 99, .. })));
        assert!(model.forward(&[5, 3], None).is_err());
    }

    #[test]
    fn gate_extremes() {
        let cfg = ModelConfig {
            d_model: 16,
            d_ff: 32,
            vocab_size: 50,
            ..ModelConfig::default()
        };
        let model = Model::<f32>::new(cfg, 3).unwrap();
        let always = ExitPolicy::threshold(0.0).unwrap();
        let never = ExitPolicy::threshold(1.0).unwrap();
        for n in [1, 5, 40] {
            assert_eq!(model.forward(&ids(n), Some(&always)).unwrap().exit_layer, 4);
            assert_eq!(model.forward(&ids(n), Some(&never)).unwrap().exit_layer, 6);
        }
    }

    #[test]
    fn early_exit_does_not_change_shallow_layers() {
        let model = Model::<f32>::new(ModelConfig { d_model: 16, d_ff: 32, vocab_size: 50, ..ModelConfig::default() }, 4).unwrap();
        let full = model.forward(&ids(30), None).unwrap();
        let early = model.forward(&ids(30), Some(&ExitPolicy::threshold(0.0).unwrap())).unwrap();
        assert_eq!(early.exits.len(), 1);
        assert_eq!(full.exit(4).unwrap(), &early.exits[0]);
        assert_eq!(&full.token_counts[..4], &early.token_counts[..]);
        assert_eq!(early.prediction, argmax(&early.exits[0].logits));
    }

    #[test]
    fn kernel_and_graph_paths_agree() {
        let cfg = ModelConfig {
            prune_layers: vec![1, 2],
            ..tiny(3, 8)
        };
        let model = Model::<f64>::new(cfg.clone(), 9).unwrap();
        let ratios = [0.3, 0.5];
        let input = ids(17);
        let trace = model.forward_with(&input, &ratios, None, None).unwrap();
        let mut g = Graph::new(model.params());
        let out = forward_on_graph(&cfg, &mut g, &input, &ratios).unwrap();
        assert_eq!(out.token_counts, trace.token_counts);
        assert_eq!(out.kept_indices, trace.kept_indices);
        for ((layer, node), rec) in out.logits.iter().zip(&trace.exits) {
            assert_eq!(*layer, rec.layer);
            for (a, b) in g.value(*node).data().iter().zip(&rec.logits) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    /// Plain post-norm transformer encoder, written independently.
    fn reference_logits(model: &Model<f64>, ids: &[u32]) -> Vec<f64> {
        let cfg = model.config();
        let names = model.param_names();
        let p = |name: &str| &model.params()[names.iter().position(|n| n == name).unwrap()];
        let d = cfg.d_model;
        let norm = |x: Vec<Vec<f64>>, g: &Matrix<f64>, b: &Matrix<f64>| -> Vec<Vec<f64>> {
            x.into_iter()
                .map(|row| {
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                    row.iter()
                        .enumerate()
                        .map(|(c, v)| (v - mean) / (var + 1e-5).sqrt() * g.get(0, c) + b.get(0, c))
                        .collect()
                })
                .collect()
        };
        let lin = |x: &[Vec<f64>], w: &Matrix<f64>, b: &Matrix<f64>| -> Vec<Vec<f64>> {
            x.iter()
                .map(|row| (0..w.cols()).map(|c| (0..w.rows()).map(|m| row[m] * w.get(m, c)).sum::<f64>() + b.get(0, c)).collect())
                .collect()
        };
        let t = ids.len();
        let mut h: Vec<Vec<f64>> = (0..t)
            .map(|i| (0..d).map(|c| p("tok_emb").get(ids[i] as usize, c) + p("pos_emb").get(i, c)).collect())
            .collect();
        h = norm(h, p("emb_ln_g"), p("emb_ln_b"));
        let dh = d / cfg.heads;
        for l in 1..=cfg.layers {
            let q = lin(&h, p(&format!("layer{l}.w_q")), p(&format!("layer{l}.b_q")));
            let k = lin(&h, p(&format!("layer{l}.w_k")), p(&format!("layer{l}.b_k")));
            let v = lin(&h, p(&format!("layer{l}.w_v")), p(&format!("layer{l}.b_v")));
            let mut mixed = vec![vec![0.0; d]; t];
            for hd in 0..cfg.heads {
                for i in 0..t {
                    let s: Vec<f64> = (0..t)
                        .map(|j| (0..dh).map(|c| q[i][hd * dh + c] * k[j][hd * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                        .collect();
                    let m = s.iter().cloned().fold(f64::MIN, f64::max);
                    let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for j in 0..t {
                        for c in 0..dh {
                            mixed[i][hd * dh + c] += e[j] / z * v[j][hd * dh + c];
                        }
                    }
                }
            }
            let a = lin(&mixed, p(&format!("layer{l}.w_o")), p(&format!("layer{l}.b_o")));
            let r: Vec<Vec<f64>> = h.iter().zip(&a).map(|(x, y)| x.iter().zip(y).map(|(u, w)| u + w).collect()).collect();
            let h1 = norm(r, p(&format!("layer{l}.ln1_g")), p(&format!("layer{l}.ln1_b")));
            let f = lin(&h1, p(&format!("layer{l}.w_1")), p(&format!("layer{l}.b_1")));
            let f: Vec<Vec<f64>> = f.into_iter().map(|row| row.into_iter().map(gelu).collect()).collect();
            let f = lin(&f, p(&format!("layer{l}.w_2")), p(&format!("layer{l}.b_2")));
            let r = h1.iter().zip(&f).map(|(x, y)| x.iter().zip(y).map(|(u, w)| u + w).collect()).collect();
            h = norm(r, p(&format!("layer{l}.ln2_g")), p(&format!("layer{l}.ln2_b")));
        }
        lin(&h[..1], p(&format!("head{}.w", cfg.layers)), p(&format!("head{}.b", cfg.layers))).remove(0)
    }

    #[test]
    fn unpruned_wide_window_matches_plain_encoder() {
        let n = 9;
        let cfg = ModelConfig {
            window: 2 * (n - 1),
            prune_layers: vec![1],
            ..tiny(2, 8)
        };
        let model = Model::<f64>::new(cfg.clone(), 5).unwrap();
        let mut g = Graph::new(model.params());
        let out = forward_on_graph(&cfg, &mut g, &ids(n), &[0.0]).unwrap();
        let got = g.value(out.logits.last().unwrap().1).data().to_vec();
        let want = reference_logits(&model, &ids(n));
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-5, "{got:?} vs {want:?}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.eatc");
        let model = Model::<f32>::new(tiny(2, 8), 2).unwrap();
        model.save(&path, serde_json::json!({"note": 1})).unwrap();
        let back = Model::<f32>::load(&path).unwrap();
        assert_eq!(back, model);
        assert_eq!(
            model.forward(&ids(6), None).unwrap(),
            back.forward(&ids(6), None).unwrap()
        );
    }
}
