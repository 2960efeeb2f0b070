//! Neural building blocks: linear layers, layer norm, multi-head attention,
//! pre-norm transformer blocks, sinusoidal position and timestep features.
//!
//! Initialization conventions, used everywhere: linear weights N(0, 1/fan_in),
//! biases zero, embedding tables N(0, 0.02^2), layer-norm affine (1, 0).
//! Layer-norm epsilon is 1e-5.

use std::sync::Arc;

use rand::Rng;

use crate::graph::{Graph, NodeId};
use crate::params::{Binding, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Result, Tensor};

pub const LN_EPS: f64 = 1e-5;

pub fn linear_init<S: Scalar, R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<S> {
    Tensor::randn(&[fan_in, fan_out], (1.0 / fan_in as f64).sqrt(), rng)
}

pub fn embedding_init<S: Scalar, R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor<S> {
    Tensor::randn(&[rows, cols], 0.02, rng)
}

#[derive(Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.register(&format!("{name}.w"), linear_init(fan_in, fan_out, rng));
        let b = store.register(&format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Linear { w, b: Some(b) }
    }

    pub fn new_no_bias<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.register(&format!("{name}.w"), linear_init(fan_in, fan_out, rng));
        Linear { w, b: None }
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        bind: &mut Binding,
        x: NodeId,
    ) -> Result<NodeId> {
        let w = bind.node(g, store, self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = bind.node(g, store, b);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, dim: usize) -> Self {
        let gamma = store.register(&format!("{name}.g"), Tensor::full(&[dim], S::one()));
        let beta = store.register(&format!("{name}.b"), Tensor::zeros(&[dim]));
        LayerNorm { gamma, beta }
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        bind: &mut Binding,
        x: NodeId,
    ) -> Result<NodeId> {
        let gamma = bind.node(g, store, self.gamma);
        let beta = bind.node(g, store, self.beta);
        g.layer_norm(x, gamma, beta, S::from_f64_c(LN_EPS))
    }
}

/// Standard multi-head self-attention. No position information of its own;
/// callers add positions to the input stream (or deliberately leave them out,
/// which makes the whole block permutation-equivariant).
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub head_dim: usize,
}

impl MultiHeadAttention {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert_eq!(dim % heads, 0, "model dim must divide across heads");
        MultiHeadAttention {
            wq: Linear::new(store, &format!("{name}.wq"), dim, dim, rng),
            wk: Linear::new(store, &format!("{name}.wk"), dim, dim, rng),
            wv: Linear::new(store, &format!("{name}.wv"), dim, dim, rng),
            wo: Linear::new(store, &format!("{name}.wo"), dim, dim, rng),
            heads,
            head_dim: dim / heads,
        }
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        bind: &mut Binding,
        x: NodeId,
        mask: Option<&Arc<Vec<bool>>>,
    ) -> Result<NodeId> {
        let q = self.wq.forward(g, store, bind, x)?;
        let k = self.wk.forward(g, store, bind, x)?;
        let v = self.wv.forward(g, store, bind, x)?;
        let scale = S::from_f64_c(1.0 / (self.head_dim as f64).sqrt());
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let off = h * self.head_dim;
            let qh = g.slice_cols(q, off, self.head_dim)?;
            let kh = g.slice_cols(k, off, self.head_dim)?;
            let vh = g.slice_cols(v, off, self.head_dim)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale)?;
            let attn = match mask {
                Some(m) => g.masked_softmax_rows(scores, Arc::clone(m))?,
                None => g.softmax_rows(scores)?,
            };
            heads.push(g.matmul(attn, vh)?);
        }
        let ctx = g.concat_cols(&heads)?;
        self.wo.forward(g, store, bind, ctx)
    }
}

/// Pre-norm transformer block: x + attn(ln(x)), then x + mlp(ln(x)).
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerBlock {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        TransformerBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, rng),
        }
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        bind: &mut Binding,
        x: NodeId,
        mask: Option<&Arc<Vec<bool>>>,
    ) -> Result<NodeId> {
        let h = self.ln1.forward(g, store, bind, x)?;
        let h = self.attn.forward(g, store, bind, h, mask)?;
        let x = g.add(x, h)?;
        let h = self.ln2.forward(g, store, bind, x)?;
        let h = self.fc1.forward(g, store, bind, h)?;
        let h = g.gelu(h)?;
        let h = self.fc2.forward(g, store, bind, h)?;
        g.add(x, h)
    }
}

/// Classic sin/cos position table, [n, dim].
pub fn sinusoidal_positions<S: Scalar>(n: usize, dim: usize) -> Tensor<S> {
    let mut data = vec![S::zero(); n * dim];
    for p in 0..n {
        for i in 0..dim / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            let arg = p as f64 * freq;
            data[p * dim + 2 * i] = S::from_f64_c(arg.sin());
            data[p * dim + 2 * i + 1] = S::from_f64_c(arg.cos());
        }
    }
    Tensor::from_vec_unchecked(&[n, dim], data)
}

/// Sinusoidal features of a continuous t in [0,1], shaped [1, dim]. The time
/// axis is stretched by 1000 so nearby t values stay distinguishable.
pub fn time_features<S: Scalar>(t: f64, dim: usize) -> Tensor<S> {
    let mut data = vec![S::zero(); dim];
    let half = dim / 2;
    for i in 0..half {
        let freq = 1.0 / 10000f64.powf(i as f64 / half as f64);
        let arg = 1000.0 * t * freq;
        data[2 * i] = S::from_f64_c(arg.sin());
        data[2 * i + 1] = S::from_f64_c(arg.cos());
    }
    Tensor::from_vec_unchecked(&[1, dim], data)
}

/// Two-layer MLP over [`time_features`], shared across all tokens of a
/// sequence via bias-style broadcast.
pub struct TimeEmbed {
    pub fc1: Linear,
    pub fc2: Linear,
    pub dim: usize,
}

impl TimeEmbed {
    pub fn new<S: Scalar, R: Rng>(store: &mut ParamStore<S>, name: &str, dim: usize, rng: &mut R) -> Self {
        TimeEmbed {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, dim, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), dim, dim, rng),
            dim,
        }
    }

    /// Returns a [1, dim] embedding node for time t.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        bind: &mut Binding,
        t: f64,
    ) -> Result<NodeId> {
        let feats = g.constant(time_features::<S>(t, self.dim));
        let h = self.fc1.forward(g, store, bind, feats)?;
        let h = g.gelu(h)?;
        self.fc2.forward(g, store, bind, h)
    }

    /// Adds the [1, dim] time embedding to every row of x.
    pub fn add_to_all<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        bind: &mut Binding,
        x: NodeId,
        t: f64,
    ) -> Result<NodeId> {
        let e = self.forward(g, store, bind, t)?;
        let flat = g.reshape(e, &[self.dim])?;
        g.add_bias(x, flat)
    }
}
