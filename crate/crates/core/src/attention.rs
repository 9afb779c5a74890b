//! Windowed multi-head attention with a global `[CLS]` token.
//!
//! Each non-CLS token sees `k/2` neighbours on either side (clipped at the
//! sequence ends), itself and CLS. CLS sees every token. Windows are laid out
//! over the current, possibly pruned, token order.

use serde::{Deserialize, Serialize};

use crate::error::{EatError, Result};
use crate::tensor::{dot, softmax_in_place, Graph, Matrix, NodeId, Scalar, MASK_PENALTY};

/// Boolean attention pattern stored as one bitset per query row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SparseMask {
    t: usize,
    k: usize,
    cls_index: usize,
    words: usize,
    bits: Vec<u64>,
}

impl SparseMask {
    /// Fully connected `t × t` pattern.
    pub fn dense(t: usize) -> Self {
        let mut mask = SparseMask::empty(t, usize::MAX);
        for i in 0..t {
            for j in 0..t {
                mask.allow(i, j);
            }
        }
        mask
    }

    fn empty(t: usize, k: usize) -> Self {
        let words = t.div_ceil(64).max(1);
        SparseMask {
            t,
            k,
            cls_index: 0,
            words,
            bits: vec![0; t * words],
        }
    }

    fn allow(&mut self, i: usize, j: usize) {
        self.bits[i * self.words + j / 64] |= 1 << (j % 64);
    }

    #[inline]
    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.words + j / 64] & (1 << (j % 64)) != 0
    }

    pub fn len(&self) -> usize {
        self.t
    }

    pub fn is_empty(&self) -> bool {
        self.t == 0
    }

    /// Window size, or `usize::MAX` for a dense mask.
    pub fn window(&self) -> usize {
        self.k
    }

    pub fn cls_index(&self) -> usize {
        self.cls_index
    }

    /// Allowed key positions for query `i`, ascending.
    pub fn row_positions(&self, i: usize) -> Vec<usize> {
        (0..self.t).filter(|&j| self.allows(i, j)).collect()
    }

    /// `0` where allowed, the large negative penalty elsewhere.
    pub fn penalty_matrix<T: Scalar>(&self) -> Matrix<T> {
        let penalty = T::of(MASK_PENALTY);
        Matrix::from_fn(self.t, self.t, |i, j| {
            if self.allows(i, j) {
                T::zero()
            } else {
                penalty
            }
        })
    }
}

/// Builds the windowed pattern for `t` tokens with CLS at `cls_index`.
pub fn build_sparse_mask(t: usize, k: usize, cls_index: usize) -> Result<SparseMask> {
    if t == 0 {
        return Err(EatError::invalid("attention mask needs at least one token"));
    }
    if !k.is_multiple_of(2) {
        return Err(EatError::invalid(format!("window size must be even, got {k}")));
    }
    if cls_index != 0 {
        return Err(EatError::invalid("CLS must sit at position 0"));
    }
    let half = k / 2;
    let mut mask = SparseMask::empty(t, k);
    for j in 0..t {
        mask.allow(0, j);
        mask.allow(j, 0);
    }
    for i in 1..t {
        let lo = i.saturating_sub(half);
        let hi = (i + half).min(t - 1);
        for j in lo..=hi {
            mask.allow(i, j);
        }
    }
    Ok(mask)
}

/// Number of allowed (query, key) pairs.
pub fn count_allowed_pairs(mask: &SparseMask) -> usize {
    mask.bits.iter().map(|w| w.count_ones() as usize).sum()
}

/// Multi-head projection weights. Head `h` owns columns
/// `h·head_dim .. (h+1)·head_dim` of the query/key/value projections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams<T = f32> {
    pub w_q: Matrix<T>,
    pub b_q: Matrix<T>,
    pub w_k: Matrix<T>,
    pub b_k: Matrix<T>,
    pub w_v: Matrix<T>,
    pub b_v: Matrix<T>,
    pub w_o: Matrix<T>,
    pub b_o: Matrix<T>,
    pub heads: usize,
}

impl<T: Scalar> AttentionParams<T> {
    pub fn width(&self) -> usize {
        self.w_q.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.width() / self.heads
    }

    fn validate(&self) -> Result<()> {
        let d = self.width();
        if self.heads == 0 || !d.is_multiple_of(self.heads) {
            return Err(EatError::invalid(format!(
                "width {d} is not divisible by {} heads",
                self.heads
            )));
        }
        for w in [&self.w_q, &self.w_k, &self.w_v, &self.w_o] {
            if w.shape() != (d, d) {
                return Err(EatError::Shape {
                    op: "attention weight",
                    lhs: (d, d),
                    rhs: w.shape(),
                });
            }
        }
        for b in [&self.b_q, &self.b_k, &self.b_v, &self.b_o] {
            if b.shape() != (1, d) {
                return Err(EatError::Shape {
                    op: "attention bias",
                    lhs: (1, d),
                    rhs: b.shape(),
                });
            }
        }
        Ok(())
    }
}

/// Applies multi-head attention, touching only the pairs the mask allows.
pub fn attend<T: Scalar>(h: &Matrix<T>, params: &AttentionParams<T>, mask: &SparseMask) -> Result<Matrix<T>> {
    params.validate()?;
    if h.rows() != mask.len() || h.cols() != params.width() {
        return Err(EatError::Shape {
            op: "attend",
            lhs: h.shape(),
            rhs: (mask.len(), params.width()),
        });
    }
    let q = h.matmul(&params.w_q)?.add_row(&params.b_q)?;
    let k = h.matmul(&params.w_k)?.add_row(&params.b_k)?;
    let v = h.matmul(&params.w_v)?.add_row(&params.b_v)?;
    let dh = params.head_dim();
    let scale = T::of(1.0 / (dh as f64).sqrt());

    let mut mixed = Matrix::zeros(h.rows(), params.width());
    let mut weights = Vec::new();
    for i in 0..h.rows() {
        let keys = mask.row_positions(i);
        for head in 0..params.heads {
            let cols = head * dh..(head + 1) * dh;
            let qi = &q.row(i)[cols.clone()];
            weights.clear();
            weights.extend(keys.iter().map(|&j| dot(qi, &k.row(j)[cols.clone()]) * scale));
            softmax_in_place(&mut weights);
            let out = &mut mixed.row_mut(i)[cols.clone()];
            for (&j, &w) in keys.iter().zip(&weights) {
                for (o, &vv) in out.iter_mut().zip(&v.row(j)[cols.clone()]) {
                    *o = *o + w * vv;
                }
            }
        }
    }
    mixed.matmul(&params.w_o)?.add_row(&params.b_o)
}

/// Graph node ids of one layer's attention parameters.
#[derive(Clone, Copy, Debug)]
pub struct AttentionNodes {
    pub w_q: NodeId,
    pub b_q: NodeId,
    pub w_k: NodeId,
    pub b_k: NodeId,
    pub w_v: NodeId,
    pub b_v: NodeId,
    pub w_o: NodeId,
    pub b_o: NodeId,
}

/// Differentiable attention: all logits are computed and disallowed pairs
/// receive the additive penalty before the softmax.
pub fn attend_on_graph<T: Scalar>(
    g: &mut Graph<'_, T>,
    h: NodeId,
    params: &AttentionNodes,
    heads: usize,
    mask: &SparseMask,
) -> Result<NodeId> {
    let d = g.value(h).cols();
    if g.value(h).rows() != mask.len() {
        return Err(EatError::Shape {
            op: "attend_on_graph",
            lhs: g.value(h).shape(),
            rhs: (mask.len(), d),
        });
    }
    let dh = d / heads;
    let q = g.matmul(h, params.w_q)?;
    let q = g.add_row(q, params.b_q)?;
    let k = g.matmul(h, params.w_k)?;
    let k = g.add_row(k, params.b_k)?;
    let v = g.matmul(h, params.w_v)?;
    let v = g.add_row(v, params.b_v)?;
    let penalty = g.constant(mask.penalty_matrix());

    let mut outs = Vec::with_capacity(heads);
    for head in 0..heads {
        let qh = g.slice_cols(q, head * dh, dh)?;
        let kh = g.slice_cols(k, head * dh, dh)?;
        let vh = g.slice_cols(v, head * dh, dh)?;
        let scores = g.matmul_nt(qh, kh)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let scores = g.add(scores, penalty)?;
        let weights = g.softmax_rows(scores)?;
        outs.push(g.matmul(weights, vh)?);
    }
    let mixed = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
    let out = g.matmul(mixed, params.w_o)?;
    g.add_row(out, params.b_o)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix<f64> {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_params(rng: &mut ChaCha8Rng, d: usize, heads: usize) -> AttentionParams<f64> {
        AttentionParams {
            w_q: random(rng, d, d),
            b_q: random(rng, 1, d),
            w_k: random(rng, d, d),
            b_k: random(rng, 1, d),
            w_v: random(rng, d, d),
            b_v: random(rng, 1, d),
            w_o: random(rng, d, d),
            b_o: random(rng, 1, d),
            heads,
        }
    }

    /// Textbook dense multi-head attention with an additive mask penalty.
    fn dense_reference(h: &Matrix<f64>, p: &AttentionParams<f64>, mask: &SparseMask) -> Matrix<f64> {
        let t = h.rows();
        let d = p.width();
        let dh = d / p.heads;
        let proj = |w: &Matrix<f64>, b: &Matrix<f64>| {
            Matrix::from_fn(t, d, |i, c| (0..d).map(|m| h.get(i, m) * w.get(m, c)).sum::<f64>() + b.get(0, c))
        };
        let (q, k, v) = (proj(&p.w_q, &p.b_q), proj(&p.w_k, &p.b_k), proj(&p.w_v, &p.b_v));
        let mut mixed = Matrix::zeros(t, d);
        for head in 0..p.heads {
            for i in 0..t {
                let logits: Vec<f64> = (0..t)
                    .map(|j| {
                        let s: f64 = (0..dh).map(|c| q.get(i, head * dh + c) * k.get(j, head * dh + c)).sum();
                        s / (dh as f64).sqrt() + if mask.allows(i, j) { 0.0 } else { MASK_PENALTY }
                    })
                    .collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                for c in 0..dh {
                    let val: f64 = (0..t).map(|j| exps[j] / z * v.get(j, head * dh + c)).sum();
                    mixed.set(i, head * dh + c, val);
                }
            }
        }
        Matrix::from_fn(t, d, |i, c| (0..d).map(|m| mixed.get(i, m) * p.w_o.get(m, c)).sum::<f64>() + p.b_o.get(0, c))
    }

    #[test]
    fn single_token_mask() {
        let m = build_sparse_mask(1, 4, 0).unwrap();
        assert!(m.allows(0, 0));
        assert_eq!(count_allowed_pairs(&m), 1);
    }

    #[test]
    fn small_window_enumeration() {
        let m = build_sparse_mask(5, 2, 0).unwrap();
        assert_eq!(m.row_positions(3), vec![0, 2, 3, 4]);
        // rows: {0..4}, {0,1,2}, {0,1,2,3}, {0,2,3,4}, {0,3,4}
        assert_eq!(count_allowed_pairs(&m), 5 + 3 + 4 + 4 + 3);
    }

    #[test]
    fn wide_window_is_dense() {
        for t in 1..12 {
            let m = build_sparse_mask(t, 2 * (t.max(2) - 1), 0).unwrap();
            assert_eq!(m.bits, SparseMask::dense(t).bits);
            assert_eq!(count_allowed_pairs(&m), t * t);
        }
    }

    #[test]
    fn invalid_arguments() {
        assert!(build_sparse_mask(4, 3, 0).is_err());
        assert!(build_sparse_mask(0, 2, 0).is_err());
        assert!(build_sparse_mask(4, 2, 1).is_err());
    }

    proptest! {
        #[test]
        fn mask_invariants(t in 1usize..80, half in 0usize..10) {
            let k = 2 * half;
            let m = build_sparse_mask(t, k, 0).unwrap();
            for i in 0..t {
                prop_assert!(m.allows(0, i) && m.allows(i, 0) && m.allows(i, i));
            }
            for i in 1..t {
                for j in 1..t {
                    prop_assert_eq!(m.allows(i, j), i.abs_diff(j) <= half);
                    prop_assert_eq!(m.allows(i, j), m.allows(j, i));
                }
            }
            prop_assert!(count_allowed_pairs(&m) <= t * (k + 2) + 2 * t);
        }

        #[test]
        fn mask_size_grows_linearly(half in 0usize..8, extra in 1usize..60) {
            let k = 2 * half;
            let t = k + 2 + extra;
            let now = count_allowed_pairs(&build_sparse_mask(t, k, 0).unwrap());
            let prev = count_allowed_pairs(&build_sparse_mask(t - 1, k, 0).unwrap());
            prop_assert!(now - prev <= k + 3);
        }
    }

    #[test]
    fn sparse_matches_dense_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for case in 0..40 {
            let t = rng.random_range(1..=32);
            let k = [2, 4, 8][case % 3];
            let p = random_params(&mut rng, 8, 2);
            let h = random(&mut rng, t, 8);
            let mask = build_sparse_mask(t, k, 0).unwrap();
            let got = attend(&h, &p, &mask).unwrap();
            assert!(got.max_abs_diff(&dense_reference(&h, &p, &mask)) < 1e-9);
        }
    }

    #[test]
    fn all_true_mask_is_plain_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = random_params(&mut rng, 8, 4);
        let h = random(&mut rng, 6, 8);
        let dense = SparseMask::dense(6);
        let got = attend(&h, &p, &dense).unwrap();
        assert!(got.max_abs_diff(&dense_reference(&h, &p, &dense)) < 1e-9);
    }

    #[test]
    fn single_token_is_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = random_params(&mut rng, 8, 2);
        let h = random(&mut rng, 1, 8);
        let mask = build_sparse_mask(1, 2, 0).unwrap();
        let v = h.matmul(&p.w_v).unwrap().add_row(&p.b_v).unwrap();
        let expected = v.matmul(&p.w_o).unwrap().add_row(&p.b_o).unwrap();
        assert!(attend(&h, &p, &mask).unwrap().max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn permuting_tokens_permutes_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let t = 9;
        let p = random_params(&mut rng, 8, 2);
        let h = random(&mut rng, t, 8);
        let mask = build_sparse_mask(t, 4, 0).unwrap();
        // CLS stays at 0; shuffle the rest
        let mut perm: Vec<usize> = (1..t).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        perm.insert(0, 0);
        let mut permuted_mask = SparseMask::empty(t, 4);
        for i in 0..t {
            for j in 0..t {
                if mask.allows(perm[i], perm[j]) {
                    permuted_mask.allow(i, j);
                }
            }
        }
        let base = dense_reference(&h, &p, &mask);
        let ph = h.gather_rows(&perm).unwrap();
        let got = attend(&ph, &p, &permuted_mask).unwrap();
        assert!(got.max_abs_diff(&base.gather_rows(&perm).unwrap()) < 1e-9);
    }

    #[test]
    fn graph_path_matches_sparse_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = random_params(&mut rng, 8, 4);
        let store = vec![
            p.w_q.clone(),
            p.b_q.clone(),
            p.w_k.clone(),
            p.b_k.clone(),
            p.w_v.clone(),
            p.b_v.clone(),
            p.w_o.clone(),
            p.b_o.clone(),
        ];
        for t in [1, 5, 17] {
            let h = random(&mut rng, t, 8);
            let mask = build_sparse_mask(t, 4, 0).unwrap();
            let mut g = Graph::new(&store);
            let ids: Vec<NodeId> = (0..8).map(|i| g.param(i)).collect();
            let nodes = AttentionNodes {
                w_q: ids[0],
                b_q: ids[1],
                w_k: ids[2],
                b_k: ids[3],
                w_v: ids[4],
                b_v: ids[5],
                w_o: ids[6],
                b_o: ids[7],
            };
            let hn = g.constant(h.clone());
            let out = attend_on_graph(&mut g, hn, &nodes, 4, &mask).unwrap();
            assert!(g.value(out).max_abs_diff(&attend(&h, &p, &mask).unwrap()) < 1e-9);
        }
    }
}
