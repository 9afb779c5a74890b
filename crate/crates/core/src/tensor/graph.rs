//! Reverse-mode autodiff over [`Matrix`] values.
//!
//! A [`Graph`] records every operation eagerly: values are computed when a
//! node is pushed, so the same graph doubles as an inference trace. Nodes are
//! appended in topological order, which makes the graph acyclic by
//! construction and lets [`Graph::backward`] sweep it once in reverse.
//!
//! Parameters are borrowed from the caller's store rather than copied in, so
//! building a graph per example is cheap.

use super::{gelu_grad, Matrix, Scalar};
use crate::error::{EatError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Constant,
    Param(usize),
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, T),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        normed: Matrix<T>,
        inv_std: Vec<T>,
    },
    Gelu(NodeId),
    GatherRows(NodeId, Vec<usize>),
    SliceCols(NodeId, usize),
    ConcatCols(Vec<NodeId>),
    Sum(NodeId),
    Pick(NodeId, usize, usize),
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    /// `None` for parameter nodes, whose value lives in the borrowed store.
    value: Option<Matrix<T>>,
}

/// Per-node and per-parameter gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T = f32> {
    nodes: Vec<Option<Matrix<T>>>,
    params: Vec<Option<Matrix<T>>>,
}

impl<T> Gradients<T> {
    /// Gradient with respect to a node, if the loss depends on it.
    pub fn node(&self, id: NodeId) -> Option<&Matrix<T>> {
        self.nodes.get(id.0).and_then(Option::as_ref)
    }

    /// Accumulated gradient for parameter `index` of the store.
    pub fn param(&self, index: usize) -> Option<&Matrix<T>> {
        self.params.get(index).and_then(Option::as_ref)
    }

    pub fn into_params(self) -> Vec<Option<Matrix<T>>> {
        self.params
    }
}

pub struct Graph<'p, T: Scalar = f32> {
    params: &'p [Matrix<T>],
    nodes: Vec<Node<T>>,
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p [Matrix<T>]) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix<T> {
        let node = &self.nodes[id.0];
        match (&node.op, &node.value) {
            (_, Some(v)) => v,
            (Op::Param(i), None) => &self.params[*i],
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    fn push(&mut self, op: Op<T>, value: Matrix<T>) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(EatError::NonFinite(op_name(&op)));
        }
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Matrix<T>) -> NodeId {
        self.nodes.push(Node {
            op: Op::Constant,
            value: Some(value),
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, index: usize) -> NodeId {
        assert!(index < self.params.len(), "parameter {index} not in store");
        self.nodes.push(Node {
            op: Op::Param(index),
            value: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push(Op::MatMul(a, b), v)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        self.push(Op::MatMulNt(a, b), v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).hadamard(self.value(b))?;
        self.push(Op::Mul(a, b), v)
    }

    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = self.value(a).add_row(self.value(bias))?;
        self.push(Op::AddRow(a, bias), v)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let s = T::of(s);
        let v = self.value(a).scale(s);
        self.push(Op::Scale(a, s), v)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).softmax_rows()?;
        self.push(Op::SoftmaxRows(a), v)
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).log_softmax_rows()?;
        self.push(Op::LogSoftmaxRows(a), v)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let (v, normed, inv_std) =
            self.value(x)
                .layer_norm_with_stats(self.value(gain), self.value(bias), eps)?;
        self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
            v,
        )
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).gelu();
        self.push(Op::Gelu(a), v)
    }

    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        let v = self.value(a).gather_rows(indices)?;
        self.push(Op::GatherRows(a, indices.to_vec()), v)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(a).slice_cols(start, len)?;
        self.push(Op::SliceCols(a, start), v)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let values: Vec<&Matrix<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::concat_cols(&values)?;
        self.push(Op::ConcatCols(parts.to_vec()), v)
    }

    /// Sum of all entries as a `1 × 1` node.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Matrix::filled(1, 1, self.value(a).sum());
        self.push(Op::Sum(a), v)
    }

    /// Single entry `(r, c)` as a `1 × 1` node.
    pub fn pick(&mut self, a: NodeId, r: usize, c: usize) -> Result<NodeId> {
        let m = self.value(a);
        if r >= m.rows() || c >= m.cols() {
            return Err(EatError::invalid(format!(
                "pick ({r}, {c}) out of range for {:?}",
                m.shape()
            )));
        }
        let v = Matrix::filled(1, 1, m.get(r, c));
        self.push(Op::Pick(a, r, c), v)
    }

    /// Reverse sweep from a scalar loss node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(EatError::Shape {
                op: "backward (loss must be 1×1)",
                lhs: shape,
                rhs: (1, 1),
            });
        }
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let mut params: Vec<Option<Matrix<T>>> = (0..self.params.len()).map(|_| None).collect();
        for (node, grad) in self.nodes.iter().zip(&grads) {
            if let (Op::Param(i), Some(g)) = (&node.op, grad) {
                match &mut params[*i] {
                    Some(acc) => acc.add_assign(g),
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    fn propagate(&self, idx: usize, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) -> Result<()> {
        let out = self.nodes[idx].value.as_ref();
        match &self.nodes[idx].op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                accumulate(grads, *a, g.matmul_nt(self.value(*b))?);
                accumulate(grads, *b, self.value(*a).matmul_tn(g)?);
            }
            Op::MatMulNt(a, b) => {
                // out = a·bᵀ: da = g·b, db = gᵀ·a
                accumulate(grads, *a, g.matmul(self.value(*b))?);
                accumulate(grads, *b, g.matmul_tn(self.value(*a))?);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.scale(-T::one()));
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g.hadamard(self.value(*b))?);
                accumulate(grads, *b, g.hadamard(self.value(*a))?);
            }
            Op::AddRow(a, bias) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *bias, g.col_sums());
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.scale(*s)),
            Op::SoftmaxRows(a) => {
                let y = out.expect("softmax value");
                let mut dx = y.clone();
                for r in 0..y.rows() {
                    let dot = super::dot(g.row(r), y.row(r));
                    for ((d, &gy), &yy) in dx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *d = yy * (gy - dot);
                    }
                }
                accumulate(grads, *a, dx);
            }
            Op::LogSoftmaxRows(a) => {
                let y = out.expect("log-softmax value");
                let mut dx = y.clone();
                for r in 0..y.rows() {
                    let total: T = g.row(r).iter().copied().sum();
                    for ((d, &gy), &ly) in dx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *d = gy - ly.exp() * total;
                    }
                }
                accumulate(grads, *a, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                let gain_v = self.value(*gain);
                let n = T::of(normed.cols() as f64);
                let mut dx = Matrix::zeros(normed.rows(), normed.cols());
                for r in 0..normed.rows() {
                    let xhat = normed.row(r);
                    let dxhat: Vec<T> =
                        g.row(r).iter().zip(gain_v.data()).map(|(&a, &b)| a * b).collect();
                    let sum_d: T = dxhat.iter().copied().sum();
                    let sum_dx: T = dxhat.iter().zip(xhat).map(|(&a, &b)| a * b).sum();
                    let scale = inv_std[r] / n;
                    for ((d, &dh), &xh) in dx.row_mut(r).iter_mut().zip(&dxhat).zip(xhat) {
                        *d = scale * (n * dh - sum_d - xh * sum_dx);
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *gain, g.hadamard(normed)?.col_sums());
                accumulate(grads, *bias, g.col_sums());
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let mut dx = g.clone();
                for (d, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
                    *d = *d * gelu_grad(xv);
                }
                accumulate(grads, *a, dx);
            }
            Op::GatherRows(a, indices) => {
                let src = self.value(*a);
                let mut dx = Matrix::zeros(src.rows(), src.cols());
                for (r, &i) in indices.iter().enumerate() {
                    for (d, &v) in dx.row_mut(i).iter_mut().zip(g.row(r)) {
                        *d = *d + v;
                    }
                }
                accumulate(grads, *a, dx);
            }
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let mut dx = Matrix::zeros(src.rows(), src.cols());
                for r in 0..g.rows() {
                    dx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                accumulate(grads, *a, dx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let width = self.value(p).cols();
                    accumulate(grads, p, g.slice_cols(offset, width)?);
                    offset += width;
                }
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                accumulate(grads, *a, Matrix::filled(r, c, g.get(0, 0)));
            }
            Op::Pick(a, r, c) => {
                let (rows, cols) = self.value(*a).shape();
                let mut dx = Matrix::zeros(rows, cols);
                dx.set(*r, *c, g.get(0, 0));
                accumulate(grads, *a, dx);
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Matrix<T>>], id: NodeId, delta: Matrix<T>) {
    match &mut grads[id.0] {
        Some(acc) => acc.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Constant => "constant",
        Op::Param(_) => "param",
        Op::MatMul(..) => "matmul",
        Op::MatMulNt(..) => "matmul_nt",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddRow(..) => "add_row",
        Op::Scale(..) => "scale",
        Op::SoftmaxRows(_) => "softmax_rows",
        Op::LogSoftmaxRows(_) => "log_softmax_rows",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Gelu(_) => "gelu",
        Op::GatherRows(..) => "gather_rows",
        Op::SliceCols(..) => "slice_cols",
        Op::ConcatCols(_) => "concat_cols",
        Op::Sum(_) => "sum",
        Op::Pick(..) => "pick",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::LAYER_NORM_EPS;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix<f64> {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn sum_gradient_is_ones() {
        let params = vec![Matrix::from_fn(3, 2, |r, c| (r * 2 + c) as f32)];
        let mut g = Graph::new(&params);
        let w = g.param(0);
        let loss = g.sum(w).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.param(0).unwrap(), &Matrix::filled(3, 2, 1.0));
    }

    #[test]
    fn half_squared_norm_gradient_is_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = vec![random(&mut rng, 4, 3)];
        let mut g = Graph::new(&params);
        let w = g.param(0);
        let sq = g.mul(w, w).unwrap();
        let s = g.sum(sq).unwrap();
        let loss = g.scale(s, 0.5).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.param(0).unwrap().max_abs_diff(&params[0]) < 1e-6);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let params = vec![Matrix::<f32>::zeros(2, 2)];
        let mut g = Graph::new(&params);
        let w = g.param(0);
        assert!(matches!(g.backward(w), Err(EatError::Shape { .. })));
    }

    #[test]
    fn shared_parameter_accumulates() {
        let params = vec![Matrix::filled(1, 2, 3.0f32)];
        let mut g = Graph::new(&params);
        let a = g.param(0);
        let b = g.param(0);
        let s = g.add(a, b).unwrap();
        let loss = g.sum(s).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.param(0).unwrap(), &Matrix::filled(1, 2, 2.0));
    }

    #[test]
    fn node_gradient_is_exposed() {
        let params = vec![Matrix::filled(2, 2, 1.0f32)];
        let mut g = Graph::new(&params);
        let w = g.param(0);
        let x = g.scale(w, 3.0).unwrap();
        let loss = g.sum(x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.node(x).unwrap(), &Matrix::filled(2, 2, 1.0));
        assert_eq!(grads.param(0).unwrap(), &Matrix::filled(2, 2, 3.0));
    }

    /// Builds `sum(weights ⊙ f(inputs))` and compares each input's autodiff
    /// gradient against central differences.
    fn check_primitive<F>(shapes: &[(usize, usize)], seed: u64, build: F)
    where
        F: Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params: Vec<Matrix<f64>> = shapes.iter().map(|&(r, c)| random(&mut rng, r, c)).collect();
        let probe_seed = rng.random::<u64>();

        let eval = |ps: &[Matrix<f64>]| -> (f64, Option<Gradients<f64>>) {
            let mut g = Graph::new(ps);
            let ids: Vec<NodeId> = (0..ps.len()).map(|i| g.param(i)).collect();
            let out = build(&mut g, &ids);
            let (r, c) = g.value(out).shape();
            let mut prng = ChaCha8Rng::seed_from_u64(probe_seed);
            let probe = g.constant(random(&mut prng, r, c));
            let prod = g.mul(out, probe).unwrap();
            let loss = g.sum(prod).unwrap();
            let value = g.value(loss).get(0, 0);
            (value, g.backward(loss).ok())
        };

        let (_, grads) = eval(&params);
        let grads = grads.unwrap();
        let eps = 1e-3;
        for (pi, p) in params.iter().enumerate() {
            let analytic = grads.param(pi).cloned().unwrap_or(Matrix::zeros(p.rows(), p.cols()));
            for k in 0..p.data().len() {
                let mut plus = params.clone();
                plus[pi].data_mut()[k] += eps;
                let mut minus = params.clone();
                minus[pi].data_mut()[k] -= eps;
                let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * eps);
                let ad = analytic.data()[k];
                let rel = (ad - fd).abs() / (fd.abs() + 1e-8);
                assert!(
                    rel < 1e-3,
                    "param {pi} entry {k}: autodiff {ad} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn finite_differences_matmul() {
        check_primitive(&[(3, 4), (4, 2)], 10, |g, x| g.matmul(x[0], x[1]).unwrap());
        check_primitive(&[(3, 4), (2, 4)], 11, |g, x| g.matmul_nt(x[0], x[1]).unwrap());
    }

    #[test]
    fn finite_differences_elementwise() {
        check_primitive(&[(2, 3), (2, 3)], 12, |g, x| g.add(x[0], x[1]).unwrap());
        check_primitive(&[(2, 3), (2, 3)], 13, |g, x| g.sub(x[0], x[1]).unwrap());
        check_primitive(&[(2, 3), (2, 3)], 14, |g, x| g.mul(x[0], x[1]).unwrap());
        check_primitive(&[(3, 3), (1, 3)], 15, |g, x| g.add_row(x[0], x[1]).unwrap());
        check_primitive(&[(2, 3)], 16, |g, x| g.scale(x[0], -1.7).unwrap());
        check_primitive(&[(2, 5)], 17, |g, x| g.gelu(x[0]).unwrap());
    }

    #[test]
    fn finite_differences_softmax_family() {
        check_primitive(&[(3, 4)], 18, |g, x| g.softmax_rows(x[0]).unwrap());
        check_primitive(&[(3, 4)], 19, |g, x| g.log_softmax_rows(x[0]).unwrap());
    }

    #[test]
    fn finite_differences_layer_norm() {
        check_primitive(&[(3, 6), (1, 6), (1, 6)], 20, |g, x| {
            g.layer_norm(x[0], x[1], x[2], LAYER_NORM_EPS).unwrap()
        });
    }

    #[test]
    fn finite_differences_structural() {
        check_primitive(&[(4, 3)], 21, |g, x| g.gather_rows(x[0], &[2, 0, 2]).unwrap());
        check_primitive(&[(3, 5)], 22, |g, x| g.slice_cols(x[0], 1, 3).unwrap());
        check_primitive(&[(2, 2), (2, 3)], 23, |g, x| g.concat_cols(&[x[0], x[1]]).unwrap());
        check_primitive(&[(3, 3)], 24, |g, x| g.sum(x[0]).unwrap());
        check_primitive(&[(3, 3)], 25, |g, x| g.pick(x[0], 1, 2).unwrap());
    }
}
