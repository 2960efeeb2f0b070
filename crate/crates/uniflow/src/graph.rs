//! Tape-based reverse-mode autodiff.
//!
//! A [`Graph`] records every op in creation order, which is already a
//! topological order because an op can only reference earlier nodes (checked
//! at construction). `backward` walks the tape in reverse and accumulates
//! vector-Jacobian products into per-node gradient buffers in that fixed
//! order, so gradients are bit-identical across runs.
//!
//! Every forward op validates its output for NaN/Inf and fails loudly;
//! backward does the same for each node gradient it consumes. Nodes whose
//! inputs are all constants skip gradient work entirely.

use std::sync::Arc;

use crate::scalar::Scalar;
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, NumericsError, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

#[derive(Clone)]
enum Op<S> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, S),
    AddBias(NodeId, NodeId),
    MatmulNN(NodeId, NodeId),
    MatmulNT(NodeId, NodeId),
    SoftmaxRows(NodeId),
    MaskedSoftmaxRows(NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, x_hat: Tensor<S>, inv_std: Vec<S> },
    Gelu(NodeId),
    Embedding { table: NodeId, ids: Arc<Vec<usize>> },
    GatherRows { x: NodeId, idx: Arc<Vec<usize>> },
    GatherFlat { x: NodeId, idx: Arc<Vec<usize>> },
    SliceCols { x: NodeId, start: usize },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    Reshape(NodeId),
    MeanPoolRows { x: NodeId, group: usize },
    MeanAll(NodeId),
    SumAll(NodeId),
    Mse(NodeId, NodeId),
    CeLogits { logits: NodeId, targets: Arc<Vec<usize>>, weights: Arc<Vec<S>>, probs: Tensor<S> },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

/// Per-node gradients produced by one backward pass.
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.grads[id.0].as_ref()
    }

    /// Gradient for a leaf, zero-filled when the loss never touched it.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor<S> {
        match self.grads[id.0].as_ref() {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Scalar value of a 1-element node.
    pub fn scalar_value(&self, id: NodeId) -> S {
        let v = self.value(id);
        assert_eq!(v.len(), 1, "scalar_value on non-scalar node");
        v.data()[0]
    }

    /// Tensor that participates in differentiation.
    pub fn leaf(&mut self, value: Tensor<S>) -> NodeId {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Tensor treated as a constant; no gradient ever flows into it.
    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        self.push_unchecked(value, Op::Leaf, false)
    }

    fn push_unchecked(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, parents: &[NodeId], context: &str) -> Result<NodeId> {
        value.check_finite(context)?;
        let next = self.nodes.len();
        let mut requires = false;
        for p in parents {
            assert!(p.0 < next, "op parent must precede the op on the tape");
            requires |= self.nodes[p.0].requires_grad;
        }
        Ok(self.push_unchecked(value, op, requires))
    }

    fn same_shape(&self, a: NodeId, b: NodeId, context: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(NumericsError::ShapeMismatch {
                context: context.into(),
                detail: format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let v = zip(self.value(a), self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let v = zip(self.value(a), self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let v = zip(self.value(a), self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, a: NodeId, c: S) -> Result<NodeId> {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c), &[a], "scale")
    }

    /// x + alpha * y, elementwise.
    pub fn axpy(&mut self, x: NodeId, alpha: S, y: NodeId) -> Result<NodeId> {
        let sy = self.scale(y, alpha)?;
        self.add(x, sy)
    }

    /// Rank-2 x plus a length-`cols` bias added to every row.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let (r, c) = (xv.rows(), xv.cols());
        if bv.len() != c {
            return Err(NumericsError::ShapeMismatch {
                context: "add_bias".into(),
                detail: format!("x cols {} vs bias len {}", c, bv.len()),
            });
        }
        let mut out = vec![S::zero(); r * c];
        let xd = xv.data();
        let bd = bv.data();
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = xd[i * c + j] + bd[j];
            }
        }
        let v = Tensor::from_vec(&[r, c], out)?;
        self.push(v, Op::AddBias(x, bias), &[x, bias], "add_bias")
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = matmul_nn(self.value(a), self.value(b))?;
        self.push(v, Op::MatmulNN(a, b), &[a, b], "matmul")
    }

    /// A . B^T without materializing the transpose.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = matmul_nt(self.value(a), self.value(b))?;
        self.push(v, Op::MatmulNT(a, b), &[a, b], "matmul_nt")
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            softmax_row(xv.row(i), &mut out[i * c..(i + 1) * c], None)?;
        }
        let v = Tensor::from_vec(&[r, c], out)?;
        self.push(v, Op::SoftmaxRows(x), &[x], "softmax_rows")
    }

    /// Row softmax over the positions the mask allows; disallowed positions
    /// get exactly zero. Every row must allow at least one position.
    pub fn masked_softmax_rows(&mut self, x: NodeId, mask: Arc<Vec<bool>>) -> Result<NodeId> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if mask.len() != r * c {
            return Err(NumericsError::ShapeMismatch {
                context: "masked_softmax_rows".into(),
                detail: format!("mask len {} vs {}x{}", mask.len(), r, c),
            });
        }
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            softmax_row(xv.row(i), &mut out[i * c..(i + 1) * c], Some(&mask[i * c..(i + 1) * c]))?;
        }
        let v = Tensor::from_vec(&[r, c], out)?;
        self.push(v, Op::MaskedSoftmaxRows(x), &[x], "masked_softmax_rows")
    }

    /// Per-row layer norm with affine parameters, population variance.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: S) -> Result<NodeId> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let gv = self.value(gamma);
        let bv = self.value(beta);
        if gv.len() != c || bv.len() != c {
            return Err(NumericsError::ShapeMismatch {
                context: "layer_norm".into(),
                detail: format!("cols {} vs gamma {} beta {}", c, gv.len(), bv.len()),
            });
        }
        let mut x_hat = vec![S::zero(); r * c];
        let mut inv_std = vec![S::zero(); r];
        let mut out = vec![S::zero(); r * c];
        let cn = S::from_f64_c(c as f64);
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().copied().sum::<S>() / cn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / cn;
            let istd = S::one() / (var + eps).sqrt();
            inv_std[i] = istd;
            for j in 0..c {
                let xh = (row[j] - mean) * istd;
                x_hat[i * c + j] = xh;
                out[i * c + j] = gv.data()[j] * xh + bv.data()[j];
            }
        }
        let x_hat = Tensor::from_vec(&[r, c], x_hat)?;
        let v = Tensor::from_vec(&[r, c], out)?;
        self.push(
            v,
            Op::LayerNorm { x, gamma, beta, x_hat, inv_std },
            &[x, gamma, beta],
            "layer_norm",
        )
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let k = S::from_f64_c(GELU_K);
        let c = S::from_f64_c(GELU_C);
        let half = S::from_f64_c(0.5);
        let v = self.value(x).map(|v| {
            let inner = k * (v + c * v * v * v);
            half * v * (S::one() + inner.tanh())
        });
        self.push(v, Op::Gelu(x), &[x], "gelu")
    }

    /// Row lookup into an embedding table; ids may repeat.
    pub fn embedding(&mut self, table: NodeId, ids: Arc<Vec<usize>>) -> Result<NodeId> {
        let tv = self.value(table);
        let (n, d) = (tv.rows(), tv.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids.iter() {
            if id >= n {
                return Err(NumericsError::InvalidArgument {
                    context: "embedding".into(),
                    detail: format!("id {} out of {} rows", id, n),
                });
            }
            out.extend_from_slice(tv.row(id));
        }
        let v = Tensor::from_vec(&[ids.len(), d], out)?;
        self.push(v, Op::Embedding { table, ids }, &[table], "embedding")
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: Arc<Vec<usize>>) -> Result<NodeId> {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx.iter() {
            if i >= n {
                return Err(NumericsError::InvalidArgument {
                    context: "gather_rows".into(),
                    detail: format!("row {} out of {}", i, n),
                });
            }
            out.extend_from_slice(xv.row(i));
        }
        let v = Tensor::from_vec(&[idx.len(), d], out)?;
        self.push(v, Op::GatherRows { x, idx }, &[x], "gather_rows")
    }

    /// Flat-index gather with an explicit output shape; the workhorse behind
    /// pixel/patch reshuffles.
    pub fn gather_flat(&mut self, x: NodeId, idx: Arc<Vec<usize>>, out_shape: &[usize]) -> Result<NodeId> {
        let xv = self.value(x);
        let n: usize = out_shape.iter().product();
        if n != idx.len() {
            return Err(NumericsError::ShapeMismatch {
                context: "gather_flat".into(),
                detail: format!("idx len {} vs shape {:?}", idx.len(), out_shape),
            });
        }
        let xd = xv.data();
        let mut out = Vec::with_capacity(n);
        for &i in idx.iter() {
            if i >= xd.len() {
                return Err(NumericsError::InvalidArgument {
                    context: "gather_flat".into(),
                    detail: format!("index {} out of {}", i, xd.len()),
                });
            }
            out.push(xd[i]);
        }
        let v = Tensor::from_vec(out_shape, out)?;
        self.push(v, Op::GatherFlat { x, idx }, &[x], "gather_flat")
    }

    /// Contiguous column slice of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if start + len > c {
            return Err(NumericsError::InvalidArgument {
                context: "slice_cols".into(),
                detail: format!("cols {}..{} out of {}", start, start + len, c),
            });
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xv.row(i)[start..start + len]);
        }
        let v = Tensor::from_vec(&[r, len], out)?;
        self.push(v, Op::SliceCols { x, start }, &[x], "slice_cols")
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        let c = self.value(parts[0]).cols();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != c {
                return Err(NumericsError::ShapeMismatch {
                    context: "concat_rows".into(),
                    detail: format!("cols {} vs {}", pv.cols(), c),
                });
            }
            rows += pv.rows();
        }
        let mut out = Vec::with_capacity(rows * c);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let v = Tensor::from_vec(&[rows, c], out)?;
        self.push(v, Op::ConcatRows(parts.to_vec()), parts, "concat_rows")
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        assert!(!parts.is_empty(), "concat_cols needs at least one part");
        let r = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != r {
                return Err(NumericsError::ShapeMismatch {
                    context: "concat_cols".into(),
                    detail: format!("rows {} vs {}", pv.rows(), r),
                });
            }
            cols += pv.cols();
        }
        let mut out = Vec::with_capacity(r * cols);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let v = Tensor::from_vec(&[r, cols], out)?;
        self.push(v, Op::ConcatCols(parts.to_vec()), parts, "concat_cols")
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).reshape(shape)?;
        self.push(v, Op::Reshape(x), &[x], "reshape")
    }

    /// Mean over non-overlapping groups of `group` consecutive rows.
    pub fn mean_pool_rows(&mut self, x: NodeId, group: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if group == 0 || r % group != 0 {
            return Err(NumericsError::InvalidArgument {
                context: "mean_pool_rows".into(),
                detail: format!("{} rows into groups of {}", r, group),
            });
        }
        let out_r = r / group;
        let gn = S::from_f64_c(group as f64);
        let mut out = vec![S::zero(); out_r * c];
        for i in 0..r {
            let o = (i / group) * c;
            for j in 0..c {
                out[o + j] = out[o + j] + xv.row(i)[j];
            }
        }
        for v in out.iter_mut() {
            *v = *v / gn;
        }
        let v = Tensor::from_vec(&[out_r, c], out)?;
        self.push(v, Op::MeanPoolRows { x, group }, &[x], "mean_pool_rows")
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let n = S::from_f64_c(xv.len() as f64);
        let s: S = xv.data().iter().copied().sum();
        let v = Tensor::scalar(s / n);
        self.push(v, Op::MeanAll(x), &[x], "mean_all")
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let s: S = xv.data().iter().copied().sum();
        let v = Tensor::scalar(s);
        self.push(v, Op::SumAll(x), &[x], "sum_all")
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mse")?;
        let av = self.value(a);
        let bv = self.value(b);
        let n = S::from_f64_c(av.len() as f64);
        let s: S = av
            .data()
            .iter()
            .zip(bv.data().iter())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let v = Tensor::scalar(s / n);
        self.push(v, Op::Mse(a, b), &[a, b], "mse")
    }

    /// Weighted mean cross-entropy of row logits against integer targets.
    /// Weight w_i scales position i; the sum of weights must be positive.
    pub fn ce_logits(
        &mut self,
        logits: NodeId,
        targets: Arc<Vec<usize>>,
        weights: Arc<Vec<S>>,
    ) -> Result<NodeId> {
        let lv = self.value(logits);
        let (r, c) = (lv.rows(), lv.cols());
        if targets.len() != r || weights.len() != r {
            return Err(NumericsError::ShapeMismatch {
                context: "ce_logits".into(),
                detail: format!("{} rows vs {} targets / {} weights", r, targets.len(), weights.len()),
            });
        }
        let total_w: S = weights.iter().copied().sum();
        if total_w <= S::zero() {
            return Err(NumericsError::InvalidArgument {
                context: "ce_logits".into(),
                detail: "weights sum to zero".into(),
            });
        }
        let mut probs = vec![S::zero(); r * c];
        let mut loss = S::zero();
        for i in 0..r {
            if targets[i] >= c {
                return Err(NumericsError::InvalidArgument {
                    context: "ce_logits".into(),
                    detail: format!("target {} out of {} classes", targets[i], c),
                });
            }
            softmax_row(lv.row(i), &mut probs[i * c..(i + 1) * c], None)?;
            let p = probs[i * c + targets[i]];
            let p = if p < S::from_f64_c(1e-30) { S::from_f64_c(1e-30) } else { p };
            loss = loss - weights[i] * p.ln();
        }
        let v = Tensor::scalar(loss / total_w);
        let probs = Tensor::from_vec(&[r, c], probs)?;
        self.push(v, Op::CeLogits { logits, targets, weights, probs }, &[logits], "ce_logits")
    }

    /// Reverse pass from a scalar loss node. Returns one gradient per node;
    /// leaves the loss never touched stay `None`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<S>> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        assert!(
            self.nodes[loss.0].requires_grad,
            "backward on a loss with no differentiable inputs"
        );
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(S::one()));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            g.check_finite("backward gradient")?;
            self.apply_vjp(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<S>>], id: NodeId, delta: Tensor<S>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => {
                debug_assert_eq!(existing.shape(), delta.shape());
                let dst = existing.data_mut();
                for (d, s) in dst.iter_mut().zip(delta.data().iter()) {
                    *d = *d + *s;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn apply_vjp(&self, i: usize, g: &Tensor<S>, grads: &mut Vec<Option<Tensor<S>>>) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let ga = zip(g, self.value(*b), |x, y| x * y);
                let gb = zip(g, self.value(*a), |x, y| x * y);
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|v| v * c));
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                if self.nodes[bias.0].requires_grad {
                    let (r, c) = (g.rows(), g.cols());
                    let mut gb = vec![S::zero(); c];
                    for row in 0..r {
                        for (jv, gv) in gb.iter_mut().zip(g.row(row).iter()) {
                            *jv = *jv + *gv;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    self.accumulate(grads, *bias, Tensor::from_vec(&shape, gb)?);
                }
            }
            Op::MatmulNN(a, b) => {
                if self.nodes[a.0].requires_grad {
                    self.accumulate(grads, *a, matmul_nt(g, self.value(*b))?);
                }
                if self.nodes[b.0].requires_grad {
                    self.accumulate(grads, *b, matmul_tn(self.value(*a), g)?);
                }
            }
            Op::MatmulNT(a, b) => {
                if self.nodes[a.0].requires_grad {
                    self.accumulate(grads, *a, matmul_nn(g, self.value(*b))?);
                }
                if self.nodes[b.0].requires_grad {
                    self.accumulate(grads, *b, matmul_tn(g, self.value(*a))?);
                }
            }
            Op::SoftmaxRows(x) | Op::MaskedSoftmaxRows(x) => {
                // dX_row = y .* (g - <g, y>); masked-out entries have y = 0.
                let y = &node.value;
                let (r, c) = (y.rows(), y.cols());
                let mut gx = vec![S::zero(); r * c];
                for row in 0..r {
                    let yr = y.row(row);
                    let gr = g.row(row);
                    let dot: S = yr.iter().zip(gr.iter()).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        gx[row * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(&[r, c], gx)?);
            }
            Op::LayerNorm { x, gamma, beta, x_hat, inv_std, .. } => {
                let (r, c) = (x_hat.rows(), x_hat.cols());
                let cn = S::from_f64_c(c as f64);
                let gv = self.value(*gamma);
                if self.nodes[beta.0].requires_grad {
                    let mut gb = vec![S::zero(); c];
                    for row in 0..r {
                        for (jv, gvv) in gb.iter_mut().zip(g.row(row).iter()) {
                            *jv = *jv + *gvv;
                        }
                    }
                    let shape = self.value(*beta).shape().to_vec();
                    self.accumulate(grads, *beta, Tensor::from_vec(&shape, gb)?);
                }
                if self.nodes[gamma.0].requires_grad {
                    let mut gg = vec![S::zero(); c];
                    for row in 0..r {
                        let xh = x_hat.row(row);
                        let gr = g.row(row);
                        for j in 0..c {
                            gg[j] = gg[j] + gr[j] * xh[j];
                        }
                    }
                    let shape = self.value(*gamma).shape().to_vec();
                    self.accumulate(grads, *gamma, Tensor::from_vec(&shape, gg)?);
                }
                if self.nodes[x.0].requires_grad {
                    let mut gx = vec![S::zero(); r * c];
                    for row in 0..r {
                        let xh = x_hat.row(row);
                        let gr = g.row(row);
                        // dxh = g .* gamma
                        let mut mean_dxh = S::zero();
                        let mut mean_dxh_xh = S::zero();
                        for j in 0..c {
                            let dxh = gr[j] * gv.data()[j];
                            mean_dxh = mean_dxh + dxh;
                            mean_dxh_xh = mean_dxh_xh + dxh * xh[j];
                        }
                        mean_dxh = mean_dxh / cn;
                        mean_dxh_xh = mean_dxh_xh / cn;
                        for j in 0..c {
                            let dxh = gr[j] * gv.data()[j];
                            gx[row * c + j] = inv_std[row] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_vec(&[r, c], gx)?);
                }
            }
            Op::Gelu(x) => {
                let k = S::from_f64_c(GELU_K);
                let c3 = S::from_f64_c(3.0 * GELU_C);
                let cc = S::from_f64_c(GELU_C);
                let half = S::from_f64_c(0.5);
                let xv = self.value(*x);
                let gx = zip(g, xv, |gv, v| {
                    let inner = k * (v + cc * v * v * v);
                    let t = inner.tanh();
                    let d_inner = k * (S::one() + c3 * v * v);
                    gv * (half * (S::one() + t) + half * v * (S::one() - t * t) * d_inner)
                });
                self.accumulate(grads, *x, gx);
            }
            Op::Embedding { table, ids } => {
                if self.nodes[table.0].requires_grad {
                    let tv = self.value(*table);
                    let (n, d) = (tv.rows(), tv.cols());
                    let mut gt = vec![S::zero(); n * d];
                    for (row, &id) in ids.iter().enumerate() {
                        let gr = g.row(row);
                        let dst = &mut gt[id * d..(id + 1) * d];
                        for (dv, gv) in dst.iter_mut().zip(gr.iter()) {
                            *dv = *dv + *gv;
                        }
                    }
                    self.accumulate(grads, *table, Tensor::from_vec(&[n, d], gt)?);
                }
            }
            Op::GatherRows { x, idx } => {
                if self.nodes[x.0].requires_grad {
                    let xv = self.value(*x);
                    let (n, d) = (xv.rows(), xv.cols());
                    let mut gx = vec![S::zero(); n * d];
                    for (row, &i) in idx.iter().enumerate() {
                        let gr = g.row(row);
                        let dst = &mut gx[i * d..(i + 1) * d];
                        for (dv, gv) in dst.iter_mut().zip(gr.iter()) {
                            *dv = *dv + *gv;
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_vec(&[n, d], gx)?);
                }
            }
            Op::GatherFlat { x, idx } => {
                if self.nodes[x.0].requires_grad {
                    let xv = self.value(*x);
                    let mut gx = vec![S::zero(); xv.len()];
                    for (o, &i) in idx.iter().enumerate() {
                        gx[i] = gx[i] + g.data()[o];
                    }
                    let shape = xv.shape().to_vec();
                    self.accumulate(grads, *x, Tensor::from_vec(&shape, gx)?);
                }
            }
            Op::SliceCols { x, start } => {
                if self.nodes[x.0].requires_grad {
                    let xv = self.value(*x);
                    let (r, c) = (xv.rows(), xv.cols());
                    let len = g.cols();
                    let mut gx = vec![S::zero(); r * c];
                    for row in 0..r {
                        let gr = g.row(row);
                        let dst = &mut gx[row * c + start..row * c + start + len];
                        dst.copy_from_slice(gr);
                    }
                    self.accumulate(grads, *x, Tensor::from_vec(&[r, c], gx)?);
                }
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let pr = self.value(p).rows();
                    if self.nodes[p.0].requires_grad {
                        let slice = g.data()[offset * c..(offset + pr) * c].to_vec();
                        self.accumulate(grads, p, Tensor::from_vec(&[pr, c], slice)?);
                    }
                    offset += pr;
                }
            }
            Op::ConcatCols(parts) => {
                let r = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if self.nodes[p.0].requires_grad {
                        let mut gp = Vec::with_capacity(r * pc);
                        for row in 0..r {
                            gp.extend_from_slice(&g.row(row)[offset..offset + pc]);
                        }
                        self.accumulate(grads, p, Tensor::from_vec(&[r, pc], gp)?);
                    }
                    offset += pc;
                }
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.reshape(&shape)?);
            }
            Op::MeanPoolRows { x, group } => {
                if self.nodes[x.0].requires_grad {
                    let xv = self.value(*x);
                    let (r, c) = (xv.rows(), xv.cols());
                    let gn = S::from_f64_c(*group as f64);
                    let mut gx = vec![S::zero(); r * c];
                    for row in 0..r {
                        let src = g.row(row / group);
                        let dst = &mut gx[row * c..(row + 1) * c];
                        for (dv, sv) in dst.iter_mut().zip(src.iter()) {
                            *dv = *sv / gn;
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_vec(&[r, c], gx)?);
                }
            }
            Op::MeanAll(x) => {
                let xv = self.value(*x);
                let n = S::from_f64_c(xv.len() as f64);
                let gs = g.data()[0] / n;
                let shape = xv.shape().to_vec();
                self.accumulate(grads, *x, Tensor::full(&shape, gs));
            }
            Op::SumAll(x) => {
                let xv = self.value(*x);
                let shape = xv.shape().to_vec();
                self.accumulate(grads, *x, Tensor::full(&shape, g.data()[0]));
            }
            Op::Mse(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let n = S::from_f64_c(av.len() as f64);
                let two = S::from_f64_c(2.0);
                let gs = g.data()[0];
                if self.nodes[a.0].requires_grad {
                    let ga = zip(av, bv, |x, y| gs * two * (x - y) / n);
                    self.accumulate(grads, *a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    let gb = zip(av, bv, |x, y| -gs * two * (x - y) / n);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::CeLogits { logits, targets, weights, probs } => {
                if self.nodes[logits.0].requires_grad {
                    let (r, c) = (probs.rows(), probs.cols());
                    let total_w: S = weights.iter().copied().sum();
                    let gs = g.data()[0];
                    let mut gl = vec![S::zero(); r * c];
                    for row in 0..r {
                        let w = weights[row];
                        if w == S::zero() {
                            continue;
                        }
                        let pr = probs.row(row);
                        let coef = gs * w / total_w;
                        for j in 0..c {
                            gl[row * c + j] = coef * pr[j];
                        }
                        gl[row * c + targets[row]] = gl[row * c + targets[row]] - coef;
                    }
                    self.accumulate(grads, *logits, Tensor::from_vec(&[r, c], gl)?);
                }
            }
        }
        Ok(())
    }
}

fn zip<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    debug_assert_eq!(a.shape(), b.shape());
    let data: Vec<S> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec_unchecked(a.shape(), data)
}

fn softmax_row<S: Scalar>(row: &[S], out: &mut [S], mask: Option<&[bool]>) -> Result<()> {
    let mut max = S::neg_infinity();
    let mut any = false;
    for (j, &v) in row.iter().enumerate() {
        if mask.map_or(true, |m| m[j]) {
            any = true;
            if v > max {
                max = v;
            }
        }
    }
    if !any {
        return Err(NumericsError::InvalidArgument {
            context: "softmax_row".into(),
            detail: "row with every position masked".into(),
        });
    }
    let mut sum = S::zero();
    for (j, &v) in row.iter().enumerate() {
        if mask.map_or(true, |m| m[j]) {
            let e = (v - max).exp();
            out[j] = e;
            sum = sum + e;
        } else {
            out[j] = S::zero();
        }
    }
    for v in out.iter_mut() {
        *v = *v / sum;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_values_compose() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::from_vec(&[2, 2], vec![0.5, 0.5, 0.5, 0.5]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[1.5, 1.5, 3.5, 3.5]);
        let loss = g.mean_all(c).unwrap();
        assert!((g.scalar_value(loss) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn backward_matmul_matches_hand_result() {
        // loss = sum(A . B), dA = 1 . B^T, dB = A^T . 1
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.leaf(Tensor::from_vec(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let c = g.matmul(a, b).unwrap();
        let loss = g.sum_all(c).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn unreachable_leaf_has_no_gradient_and_reads_as_zeros() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(Tensor::scalar(2.0));
        let b = g.leaf(Tensor::scalar(3.0));
        let loss = g.mul(a, a).unwrap();
        let loss = g.mean_all(loss).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!((grads.get(a).unwrap().data()[0] - 4.0).abs() < 1e-12);
        assert!(grads.get(b).is_none());
        assert_eq!(grads.get_or_zeros(b, &[1]).data(), &[0.0]);
    }

    #[test]
    fn constants_never_accumulate_gradients() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(Tensor::scalar(2.0));
        let k = g.constant(Tensor::scalar(5.0));
        let prod = g.mul(a, k).unwrap();
        let loss = g.mean_all(prod).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(k).is_none());
        assert!((grads.get(a).unwrap().data()[0] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_accumulates_across_fanout() {
        // loss = a*a + a  =>  dloss/da = 2a + 1
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(Tensor::scalar(3.0));
        let sq = g.mul(a, a).unwrap();
        let s = g.add(sq, a).unwrap();
        let loss = g.sum_all(s).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!((grads.get(a).unwrap().data()[0] - 7.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_masked_entries_are_zero() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]).unwrap());
        let mask = Arc::new(vec![true, true, false, true, false, false]);
        let y = g.masked_softmax_rows(x, mask).unwrap();
        let v = g.value(y);
        assert_eq!(v.at2(0, 2), 0.0);
        assert!((v.at2(0, 0) + v.at2(0, 1) - 1.0).abs() < 1e-12);
        assert_eq!(v.at2(1, 0), 1.0);
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 2]));
        let mask = Arc::new(vec![false, false]);
        assert!(g.masked_softmax_rows(x, mask).is_err());
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g: Graph<f32> = Graph::new();
        let big = g.leaf(Tensor::full(&[4], f32::MAX));
        assert!(g.mul(big, big).is_err());
    }

    #[test]
    fn ce_logits_uniform_matches_log_vocab() {
        let mut g: Graph<f64> = Graph::new();
        let logits = g.leaf(Tensor::zeros(&[3, 32]));
        let targets = Arc::new(vec![0usize, 5, 31]);
        let weights = Arc::new(vec![1.0f64, 1.0, 0.0]);
        let loss = g.ce_logits(logits, targets, weights).unwrap();
        assert!((g.scalar_value(loss) - (32.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_gradient_is_softmax_minus_onehot_scaled() {
        let mut g: Graph<f64> = Graph::new();
        let logits = g.leaf(Tensor::zeros(&[2, 4]));
        let targets = Arc::new(vec![1usize, 2]);
        let weights = Arc::new(vec![1.0f64, 1.0]);
        let loss = g.ce_logits(logits, targets, weights).unwrap();
        let grads = g.backward(loss).unwrap();
        let gl = grads.get(logits).unwrap();
        // uniform probs 0.25, scaled by w/W = 0.5
        assert!((gl.at2(0, 0) - 0.125).abs() < 1e-12);
        assert!((gl.at2(0, 1) + 0.375).abs() < 1e-12);
        assert!((gl.at2(1, 2) + 0.375).abs() < 1e-12);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 2]));
        let b = g.add(a, a).unwrap();
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| g.backward(b)));
        assert!(result.is_err());
    }

    #[test]
    fn gather_and_concat_row_round_trip() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let top = g.gather_rows(x, Arc::new(vec![0, 1])).unwrap();
        let bot = g.gather_rows(x, Arc::new(vec![2])).unwrap();
        let back = g.concat_rows(&[top, bot]).unwrap();
        assert_eq!(g.value(back).data(), g.value(x).data());
        let loss = g.sum_all(back).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn mean_pool_rows_averages_groups() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[4, 1], vec![1.0, 3.0, 5.0, 7.0]).unwrap());
        let y = g.mean_pool_rows(x, 2).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 6.0]);
        let loss = g.sum_all(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.5, 0.5, 0.5, 0.5]);
    }
}
