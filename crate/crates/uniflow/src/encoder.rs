//! Frozen patch encoder: the semantic feature extractor every other stage
//! conditions on. Randomly initialized at construction, then frozen; the
//! linear probe quantifies how much scene structure the random features
//! carry (plenty, on this corpus: color and shape are linearly readable).
//!
//! Pipeline: 4x4 patchify (64 tokens of 48 values) -> linear to 144 channels
//! -> add fixed sinusoidal positions -> 2 self-attention blocks -> layernorm.

use rand::Rng;

use crate::graph::Graph;
use crate::nn::{sinusoidal_positions, LayerNorm, Linear, TransformerBlock};
use crate::params::{Binding, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{NumericsError, Result, Tensor};
use crate::toydata::{IMG_LEN, IMG_SIZE};

pub const PATCH: usize = 4;
pub const N_TOKENS: usize = 64;
pub const PATCH_FEAT: usize = PATCH * PATCH * 3;
pub const FEAT_DIM: usize = 144;
pub const ENC_BLOCKS: usize = 2;
const ENC_HEADS: usize = 4;

/// Flat image index for each (token, feature) slot, row-major over an
/// 8x8 grid of 4x4 patches; feature layout (dr, dc, channel).
pub fn patchify_indices() -> Vec<usize> {
    let side = IMG_SIZE / PATCH;
    let mut idx = Vec::with_capacity(side * side * PATCH_FEAT);
    for pr in 0..side {
        for pc in 0..side {
            for dr in 0..PATCH {
                for dc in 0..PATCH {
                    for ch in 0..3 {
                        let r = pr * PATCH + dr;
                        let c = pc * PATCH + dc;
                        idx.push((r * IMG_SIZE + c) * 3 + ch);
                    }
                }
            }
        }
    }
    idx
}

/// Inverse of [`patchify_indices`]: for each flat image slot, its position
/// in the patch layout.
pub fn unpatchify_indices() -> Vec<usize> {
    let fwd = patchify_indices();
    let mut inv = vec![0usize; fwd.len()];
    for (patch_pos, &img_pos) in fwd.iter().enumerate() {
        inv[img_pos] = patch_pos;
    }
    inv
}

/// [3072] image -> [64, 48] patch tokens.
pub fn patchify<S: Scalar>(image: &Tensor<S>) -> Result<Tensor<S>> {
    if image.len() != IMG_LEN {
        return Err(NumericsError::ShapeMismatch {
            context: "patchify".into(),
            detail: format!("expected {} values, got {}", IMG_LEN, image.len()),
        });
    }
    let idx = patchify_indices();
    let data: Vec<S> = idx.iter().map(|&i| image.data()[i]).collect();
    Ok(Tensor::from_vec_unchecked(&[N_TOKENS, PATCH_FEAT], data))
}

/// [64, 48] patch tokens -> [3072] image.
pub fn unpatchify<S: Scalar>(patches: &Tensor<S>) -> Result<Tensor<S>> {
    if patches.len() != N_TOKENS * PATCH_FEAT {
        return Err(NumericsError::ShapeMismatch {
            context: "unpatchify".into(),
            detail: format!("expected {} values, got {}", N_TOKENS * PATCH_FEAT, patches.len()),
        });
    }
    let idx = unpatchify_indices();
    let data: Vec<S> = idx.iter().map(|&i| patches.data()[i]).collect();
    Ok(Tensor::from_vec_unchecked(&[IMG_LEN], data))
}

pub struct Encoder<S> {
    proj: Linear,
    blocks: Vec<TransformerBlock>,
    ln_f: LayerNorm,
    pos: Tensor<S>,
}

impl<S: Scalar> Encoder<S> {
    /// Registers parameters under "enc." and freezes them immediately.
    pub fn new<R: Rng>(store: &mut ParamStore<S>, rng: &mut R) -> Self {
        let proj = Linear::new(store, "enc.proj", PATCH_FEAT, FEAT_DIM, rng);
        let blocks = (0..ENC_BLOCKS)
            .map(|i| TransformerBlock::new(store, &format!("enc.b{i}"), FEAT_DIM, ENC_HEADS, 2 * FEAT_DIM, rng))
            .collect();
        let ln_f = LayerNorm::new(store, "enc.ln_f", FEAT_DIM);
        store.freeze_prefix("enc.");
        Encoder { proj, blocks, ln_f, pos: sinusoidal_positions(N_TOKENS, FEAT_DIM) }
    }

    /// [3072] image -> [64, 144] feature grid. Deterministic; all encoder
    /// parameters are frozen so nothing differentiable happens here.
    pub fn encode(&self, store: &ParamStore<S>, image: &Tensor<S>) -> Result<Tensor<S>> {
        let patches = patchify(image)?;
        let mut g = Graph::new();
        let mut bind = Binding::new(store);
        let x = g.constant(patches);
        let x = self.proj.forward(&mut g, store, &mut bind, x)?;
        let pos = g.constant(self.pos.clone());
        let mut x = g.add(x, pos)?;
        for b in &self.blocks {
            x = b.forward(&mut g, store, &mut bind, x, None)?;
        }
        let x = self.ln_f.forward(&mut g, store, &mut bind, x)?;
        Ok(g.value(x).clone())
    }

    /// Feature grids for a whole corpus, computed once. The frozen encoder
    /// makes this cacheable for an entire training run.
    pub fn encode_all(&self, store: &ParamStore<S>, images: &[Tensor<S>]) -> Result<Vec<Tensor<S>>> {
        images.iter().map(|img| self.encode(store, img)).collect()
    }
}

/// Mean over tokens: [N, D] -> [D] pooled feature vector.
pub fn pool_tokens<S: Scalar>(grid: &Tensor<S>) -> Vec<f64> {
    let (n, d) = (grid.rows(), grid.cols());
    let mut out = vec![0.0f64; d];
    for i in 0..n {
        for (o, &v) in out.iter_mut().zip(grid.row(i).iter()) {
            *o += v.to_f64_c();
        }
    }
    for o in out.iter_mut() {
        *o /= n as f64;
    }
    out
}

/// Softmax-regression probe: one linear layer, full-batch gradient descent,
/// fixed 200 epochs at lr 0.1, deterministic 3:1 train/test split by index.
/// Returns held-out accuracy.
pub fn linear_probe(features: &[Vec<f64>], labels: &[usize], classes: usize) -> Result<f64> {
    if classes < 2 {
        return Err(NumericsError::InvalidArgument {
            context: "linear_probe".into(),
            detail: format!("needs at least 2 classes, got {classes}"),
        });
    }
    if features.len() != labels.len() || features.is_empty() {
        return Err(NumericsError::InvalidArgument {
            context: "linear_probe".into(),
            detail: "features and labels must align and be non-empty".into(),
        });
    }
    let dim = features[0].len();
    let mut train: Vec<usize> = Vec::new();
    let mut test: Vec<usize> = Vec::new();
    for i in 0..features.len() {
        if i % 4 == 3 {
            test.push(i);
        } else {
            train.push(i);
        }
    }

    // per-dimension standardization fitted on train
    let mut mean = vec![0.0f64; dim];
    for &i in &train {
        for (m, &v) in mean.iter_mut().zip(features[i].iter()) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= train.len() as f64;
    }
    let mut std = vec![0.0f64; dim];
    for &i in &train {
        for j in 0..dim {
            let d = features[i][j] - mean[j];
            std[j] += d * d;
        }
    }
    for s in std.iter_mut() {
        *s = (*s / train.len() as f64).sqrt().max(1e-8);
    }
    let norm = |i: usize| -> Vec<f64> {
        (0..dim).map(|j| (features[i][j] - mean[j]) / std[j]).collect()
    };

    let mut w = vec![0.0f64; classes * dim];
    let mut b = vec![0.0f64; classes];
    const EPOCHS: usize = 200;
    const LR: f64 = 0.1;
    for _ in 0..EPOCHS {
        let mut gw = vec![0.0f64; classes * dim];
        let mut gb = vec![0.0f64; classes];
        for &i in &train {
            let x = norm(i);
            let p = softmax_logits(&w, &b, &x, classes, dim);
            for k in 0..classes {
                let err = p[k] - if k == labels[i] { 1.0 } else { 0.0 };
                gb[k] += err;
                for j in 0..dim {
                    gw[k * dim + j] += err * x[j];
                }
            }
        }
        let inv = 1.0 / train.len() as f64;
        for (wv, gv) in w.iter_mut().zip(gw.iter()) {
            *wv -= LR * gv * inv;
        }
        for (bv, gv) in b.iter_mut().zip(gb.iter()) {
            *bv -= LR * gv * inv;
        }
    }

    let mut correct = 0usize;
    for &i in &test {
        let x = norm(i);
        let p = softmax_logits(&w, &b, &x, classes, dim);
        let pred = (0..classes).max_by(|&a, &c| p[a].partial_cmp(&p[c]).unwrap()).unwrap();
        if pred == labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

fn softmax_logits(w: &[f64], b: &[f64], x: &[f64], classes: usize, dim: usize) -> Vec<f64> {
    let mut logits = vec![0.0f64; classes];
    for k in 0..classes {
        let mut s = b[k];
        for j in 0..dim {
            s += w[k * dim + j] * x[j];
        }
        logits[k] = s;
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        sum += *l;
    }
    for l in logits.iter_mut() {
        *l /= sum;
    }
    logits
}
