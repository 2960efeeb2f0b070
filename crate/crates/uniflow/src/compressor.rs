//! Semantic compressor and decompressor between the encoder's feature grid
//! and the small latent the rest of the system predicts and decodes.
//!
//! Variants:
//! * `Identity`: z = Z, the uncompressed baseline.
//! * `Mlp`: per-token 2-layer map D -> 4d -> d, exactly token-independent.
//! * `Mha`: 2 self-attention blocks at width D with no positional encoding
//!   (hence permutation-equivariant over tokens), then a per-token linear
//!   D -> d.
//!
//! An optional non-overlapping 4-token mean-pool in front of the map gives
//! the sequence-reduction variant (64 tokens down to 16 at full width).
//! The decompressor is a linear d -> D plus one attention block at width D.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{FEAT_DIM, N_TOKENS};
use crate::graph::{Graph, NodeId};
use crate::nn::{Linear, TransformerBlock};
use crate::params::{Binding, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{NumericsError, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Identity,
    Mlp,
    Mha,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CompressorConfig {
    pub variant: Variant,
    /// latent channels per token
    pub d: usize,
    /// tokens merged by mean-pool before the map (1 = no merge)
    pub pool: usize,
}

impl Default for CompressorConfig {
    fn default() -> Self {
        CompressorConfig { variant: Variant::Mha, d: 8, pool: 1 }
    }
}

impl CompressorConfig {
    pub fn tokens_out(&self) -> usize {
        N_TOKENS / self.pool
    }

    pub fn uncompressed() -> Self {
        CompressorConfig { variant: Variant::Identity, d: FEAT_DIM, pool: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pool == 0 || N_TOKENS % self.pool != 0 {
            return Err(NumericsError::InvalidArgument {
                context: "CompressorConfig".into(),
                detail: format!("pool {} must divide {}", self.pool, N_TOKENS),
            });
        }
        if self.variant == Variant::Identity && self.d != FEAT_DIM {
            return Err(NumericsError::InvalidArgument {
                context: "CompressorConfig".into(),
                detail: "identity variant keeps d = D".into(),
            });
        }
        Ok(())
    }
}

enum VariantParams {
    Identity,
    Mlp { fc1: Linear, fc2: Linear },
    Mha { blocks: Vec<TransformerBlock>, head: Linear },
}

pub struct Compressor {
    pub cfg: CompressorConfig,
    params: VariantParams,
    fuse_proj: Linear,
}

impl Compressor {
    /// Registers parameters under "comp.".
    pub fn new<S: Scalar, R: Rng>(store: &mut ParamStore<S>, cfg: CompressorConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let params = match cfg.variant {
            Variant::Identity => VariantParams::Identity,
            Variant::Mlp => VariantParams::Mlp {
                fc1: Linear::new(store, "comp.fc1", FEAT_DIM, 4 * cfg.d, rng),
                fc2: Linear::new(store, "comp.fc2", 4 * cfg.d, cfg.d, rng),
            },
            Variant::Mha => {
                let blocks = (0..2)
                    .map(|i| {
                        TransformerBlock::new(store, &format!("comp.b{i}"), FEAT_DIM, 4, 2 * FEAT_DIM, rng)
                    })
                    .collect();
                let head = Linear::new(store, "comp.head", FEAT_DIM, cfg.d, rng);
                VariantParams::Mha { blocks, head }
            }
        };
        let fuse_proj = Linear::new(store, "comp.fuse", cfg.d, FEAT_DIM, rng);
        Ok(Compressor { cfg, params, fuse_proj })
    }

    /// [N, D] feature grid -> [n, d] latent.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        bind: &mut Binding,
        z: NodeId,
    ) -> Result<NodeId> {
        let zv = g.value(z);
        if zv.shape() != [N_TOKENS, FEAT_DIM] {
            return Err(NumericsError::ShapeMismatch {
                context: "compress".into(),
                detail: format!("want [{N_TOKENS}, {FEAT_DIM}], got {:?}", zv.shape()),
            });
        }
        let x = if self.cfg.pool > 1 { g.mean_pool_rows(z, self.cfg.pool)? } else { z };
        match &self.params {
            VariantParams::Identity => Ok(x),
            VariantParams::Mlp { fc1, fc2 } => {
                let h = fc1.forward(g, store, bind, x)?;
                let h = g.gelu(h)?;
                fc2.forward(g, store, bind, h)
            }
            VariantParams::Mha { blocks, head } => {
                let mut h = x;
                for b in blocks {
                    h = b.forward(g, store, bind, h, None)?;
                }
                head.forward(g, store, bind, h)
            }
        }
    }

    /// Plain (non-training) compression of a feature grid.
    pub fn compress_value<S: Scalar>(&self, store: &ParamStore<S>, z: &Tensor<S>) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let mut bind = Binding::new(store);
        let zn = g.constant(z.clone());
        let out = self.forward(&mut g, store, &mut bind, zn)?;
        Ok(g.value(out).clone())
    }

    /// seq_concat: [Z; proj(z latent)] along tokens -> (N+n, D).
    pub fn fuse_seq<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        bind: &mut Binding,
        z: NodeId,
        latent: NodeId,
    ) -> Result<NodeId> {
        if g.value(z).cols() != FEAT_DIM || g.value(latent).cols() != self.cfg.d {
            return Err(NumericsError::ShapeMismatch {
                context: "fuse_seq".into(),
                detail: format!("Z {:?}, latent {:?}", g.value(z).shape(), g.value(latent).shape()),
            });
        }
        let p = self.fuse_proj.forward(g, store, bind, latent)?;
        g.concat_rows(&[z, p])
    }

    /// dim_concat: [Z | z latent] along channels -> (N, D+d); token counts
    /// must match.
    pub fn fuse_dim<S: Scalar>(&self, g: &mut Graph<S>, z: NodeId, latent: NodeId) -> Result<NodeId> {
        if g.value(z).rows() != g.value(latent).rows() {
            return Err(NumericsError::ShapeMismatch {
                context: "fuse_dim".into(),
                detail: format!("{} vs {} tokens", g.value(z).rows(), g.value(latent).rows()),
            });
        }
        g.concat_cols(&[z, latent])
    }
}

pub struct Decompressor {
    lin: Linear,
    block: TransformerBlock,
}

impl Decompressor {
    /// Registers parameters under "decomp.".
    pub fn new<S: Scalar, R: Rng>(store: &mut ParamStore<S>, d: usize, rng: &mut R) -> Self {
        Decompressor {
            lin: Linear::new(store, "decomp.lin", d, FEAT_DIM, rng),
            block: TransformerBlock::new(store, "decomp.b0", FEAT_DIM, 4, 2 * FEAT_DIM, rng),
        }
    }

    /// [n, d] latent -> [n, D] conditioning tokens.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        bind: &mut Binding,
        latent: NodeId,
    ) -> Result<NodeId> {
        let h = self.lin.forward(g, store, bind, latent)?;
        self.block.forward(g, store, bind, h, None)
    }
}

/// Per-channel standardization statistics for flow-matching targets. Fitted
/// once on a corpus of latents, stored in the stage checkpoint, inverted at
/// sampling time.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LatentNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LatentNorm {
    pub fn fit<S: Scalar>(latents: &[Tensor<S>]) -> Result<LatentNorm> {
        if latents.len() < 100 {
            return Err(NumericsError::InvalidArgument {
                context: "LatentNorm::fit".into(),
                detail: format!("needs at least 100 latents, got {}", latents.len()),
            });
        }
        let d = latents[0].cols();
        let mut mean = vec![0.0f64; d];
        let mut count = 0usize;
        for t in latents {
            for r in 0..t.rows() {
                for (m, &v) in mean.iter_mut().zip(t.row(r).iter()) {
                    *m += v.to_f64_c();
                }
                count += 1;
            }
        }
        for m in mean.iter_mut() {
            *m /= count as f64;
        }
        let mut var = vec![0.0f64; d];
        for t in latents {
            for r in 0..t.rows() {
                for (j, &v) in t.row(r).iter().enumerate() {
                    let dv = v.to_f64_c() - mean[j];
                    var[j] += dv * dv;
                }
            }
        }
        let mut std = vec![0.0f64; d];
        for j in 0..d {
            let s = (var[j] / count as f64).sqrt();
            if s < 1e-10 {
                return Err(NumericsError::InvalidArgument {
                    context: "LatentNorm::fit".into(),
                    detail: format!("channel {j} has zero variance"),
                });
            }
            std[j] = s;
        }
        Ok(LatentNorm { mean, std })
    }

    pub fn standardize<S: Scalar>(&self, t: &Tensor<S>) -> Tensor<S> {
        self.apply(t, false)
    }

    pub fn destandardize<S: Scalar>(&self, t: &Tensor<S>) -> Tensor<S> {
        self.apply(t, true)
    }

    fn apply<S: Scalar>(&self, t: &Tensor<S>, invert: bool) -> Tensor<S> {
        let d = self.mean.len();
        assert_eq!(t.cols(), d, "latent width mismatch");
        let mut out = t.clone();
        let data = out.data_mut();
        for r in 0..t.rows() {
            for j in 0..d {
                let v = data[r * d + j].to_f64_c();
                let w = if invert { v * self.std[j] + self.mean[j] } else { (v - self.mean[j]) / self.std[j] };
                data[r * d + j] = S::from_f64_c(w);
            }
        }
        out
    }
}

/// Row permutation helper for equivariance checks.
pub fn permute_rows<S: Scalar>(t: &Tensor<S>, perm: &[usize]) -> Tensor<S> {
    assert_eq!(perm.len(), t.rows());
    let c = t.cols();
    let mut data = Vec::with_capacity(t.len());
    for &p in perm {
        data.extend_from_slice(t.row(p));
    }
    Tensor::from_vec_unchecked(&[t.rows(), c], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fixture(cfg: CompressorConfig) -> (ParamStore<f32>, Compressor, Decompressor) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let comp = Compressor::new(&mut store, cfg, &mut rng).unwrap();
        let dec = Decompressor::new(&mut store, cfg.d, &mut rng);
        (store, comp, dec)
    }

    fn random_grid(seed: u64) -> Tensor<f32> {
        Tensor::randn(&[N_TOKENS, FEAT_DIM], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn default_config_compresses_to_64_by_8() {
        let (store, comp, _) = fixture(CompressorConfig::default());
        let z = random_grid(1);
        let out = comp.compress_value(&store, &z).unwrap();
        assert_eq!(out.shape(), &[64, 8]);
    }

    #[test]
    fn sequence_variant_compresses_to_16_by_144() {
        let cfg = CompressorConfig { variant: Variant::Mlp, d: FEAT_DIM, pool: 4 };
        let (store, comp, _) = fixture(cfg);
        let out = comp.compress_value(&store, &random_grid(2)).unwrap();
        assert_eq!(out.shape(), &[16, 144]);
    }

    #[test]
    fn wrong_input_shape_errors() {
        let (store, comp, _) = fixture(CompressorConfig::default());
        let z = Tensor::<f32>::zeros(&[10, FEAT_DIM]);
        assert!(comp.compress_value(&store, &z).is_err());
    }

    #[test]
    fn mha_variant_is_permutation_equivariant() {
        let (store, comp, _) = fixture(CompressorConfig::default());
        let z = random_grid(3);
        let base = comp.compress_value(&store, &z).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        use rand::Rng;
        for _ in 0..10 {
            let mut perm: Vec<usize> = (0..N_TOKENS).collect();
            for i in (1..perm.len()).rev() {
                let j = rng.gen_range(0..=i);
                perm.swap(i, j);
            }
            let out_perm = comp.compress_value(&store, &permute_rows(&z, &perm)).unwrap();
            let want = permute_rows(&base, &perm);
            let diff = out_perm.max_abs_diff(&want);
            assert!(diff < 1e-5, "equivariance violated: {diff}");
        }
    }

    #[test]
    fn mlp_variant_is_token_independent() {
        let cfg = CompressorConfig { variant: Variant::Mlp, d: 8, pool: 1 };
        let (store, comp, _) = fixture(cfg);
        let z = random_grid(4);
        let base = comp.compress_value(&store, &z).unwrap();
        let mut z2 = z.clone();
        for v in z2.data_mut()[5 * FEAT_DIM..6 * FEAT_DIM].iter_mut() {
            *v += 3.0;
        }
        let out = comp.compress_value(&store, &z2).unwrap();
        for tok in 0..N_TOKENS {
            if tok == 5 {
                continue;
            }
            for (a, b) in base.row(tok).iter().zip(out.row(tok).iter()) {
                assert!((a - b).abs() < 1e-7, "token {tok} moved");
            }
        }
    }

    #[test]
    fn mlp_concat_commutes_with_compression() {
        // token independence again, phrased as the concat law on halves
        let cfg = CompressorConfig { variant: Variant::Mlp, d: 8, pool: 1 };
        let (store, comp, _) = fixture(cfg);
        let z = random_grid(6);
        let full = comp.compress_value(&store, &z).unwrap();
        // compressing any row subset yields the matching rows; emulate by
        // permuting halves through the map
        let perm: Vec<usize> = (32..64).chain(0..32).collect();
        let swapped = comp.compress_value(&store, &permute_rows(&z, &perm)).unwrap();
        let want = permute_rows(&full, &perm);
        assert!(swapped.max_abs_diff(&want) < 1e-7);
    }

    #[test]
    fn decompress_shapes_and_grad_reaches_compressor() {
        let (store, comp, dec) = fixture(CompressorConfig::default());
        let z = random_grid(7);
        let mut g: Graph<f32> = Graph::new();
        let mut bind = Binding::new(&store);
        let zn = g.constant(z);
        let latent = comp.forward(&mut g, &store, &mut bind, zn).unwrap();
        let cond = dec.forward(&mut g, &store, &mut bind, latent).unwrap();
        assert_eq!(g.value(cond).shape(), &[64, FEAT_DIM]);
        let sq = g.mul(cond, cond).unwrap();
        let loss = g.mean_all(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        let collected = bind.collect(&grads, &store);
        let comp_grad_norm: f32 = collected
            .iter()
            .filter(|(id, _)| store.name(*id).starts_with("comp."))
            .map(|(_, t)| t.squared_norm())
            .sum();
        assert!(comp_grad_norm > 0.0, "no gradient reached compressor params");
    }

    #[test]
    fn zero_latent_decompresses_to_fixed_bias_pattern() {
        let (store, _, dec) = fixture(CompressorConfig::default());
        let run = || {
            let mut g: Graph<f32> = Graph::new();
            let mut bind = Binding::new(&store);
            let z = g.constant(Tensor::zeros(&[64, 8]));
            let out = dec.forward(&mut g, &store, &mut bind, z).unwrap();
            g.value(out).clone()
        };
        let a = run();
        let b = run();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn fuse_shapes_match_contract() {
        let (store, comp, _) = fixture(CompressorConfig::default());
        let z = random_grid(8);
        let mut g: Graph<f32> = Graph::new();
        let mut bind = Binding::new(&store);
        let zn = g.constant(z);
        let latent = comp.forward(&mut g, &store, &mut bind, zn).unwrap();
        let seq = comp.fuse_seq(&mut g, &store, &mut bind, zn, latent).unwrap();
        assert_eq!(g.value(seq).shape(), &[128, 144]);
        let dim = comp.fuse_dim(&mut g, zn, latent).unwrap();
        assert_eq!(g.value(dim).shape(), &[64, 152]);
    }

    #[test]
    fn latent_norm_standardizes_and_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let latents: Vec<Tensor<f64>> =
            (0..120).map(|_| Tensor::randn(&[8, 4], 2.5, &mut rng).map(|v| v + 3.0)).collect();
        let norm = LatentNorm::fit(&latents).unwrap();
        // standardized set has mean ~0, std ~1 per channel
        let std_all: Vec<Tensor<f64>> = latents.iter().map(|t| norm.standardize(t)).collect();
        let refit = LatentNorm::fit(&std_all).unwrap();
        for j in 0..4 {
            assert!(refit.mean[j].abs() < 1e-6);
            assert!((refit.std[j] - 1.0).abs() < 1e-6);
        }
        let back = norm.destandardize(&std_all[0]);
        assert!(back.max_abs_diff(&latents[0]) < 1e-6);
    }

    #[test]
    fn constant_channel_is_rejected_by_name() {
        let mut latents: Vec<Tensor<f64>> = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..110 {
            let mut t = Tensor::randn(&[4, 3], 1.0, &mut rng);
            for r in 0..4 {
                t.data_mut()[r * 3 + 1] = 7.0;
            }
            latents.push(t);
        }
        let err = LatentNorm::fit(&latents).unwrap_err();
        assert!(err.to_string().contains("channel 1"), "{err}");
    }

    #[test]
    fn already_standard_data_fits_near_identity_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let latents: Vec<Tensor<f64>> = (0..400).map(|_| Tensor::randn(&[16, 4], 1.0, &mut rng)).collect();
        let norm = LatentNorm::fit(&latents).unwrap();
        for j in 0..4 {
            assert!(norm.mean[j].abs() < 0.05);
            assert!((norm.std[j] - 1.0).abs() < 0.05);
        }
    }
}
