//! Conditional pixel decoder: a transformer velocity field over image patch
//! tokens, conditioned on decompressed latents, trained jointly with the
//! compressor (stage 1) under a flow-matching + perceptual reconstruction
//! loss, and sampled with Euler integration from noise.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checker::check_image;
use crate::compressor::{Compressor, CompressorConfig, Decompressor, LatentNorm};
use crate::encoder::{patchify, unpatchify, Encoder, FEAT_DIM, N_TOKENS, PATCH_FEAT};
use crate::graph::{Graph, NodeId};
use crate::metrics::TrainRecord;
use crate::nn::{LayerNorm, Linear, TimeEmbed, TransformerBlock};
use crate::optim::{lr_at, AdamW, AdamWConfig};
use crate::params::{Binding, GradAccum, ParamId, ParamStore};
use crate::sampling::euler_integrate;
use crate::scalar::Scalar;
use crate::tensor::{NumericsError, Result, Tensor};
use crate::toydata::{render, Scene, IMG_LEN};

pub const DEC_WIDTH: usize = 128;
pub const DEC_BLOCKS: usize = 4;
pub const DEC_HEADS: usize = 4;
pub const DEC_HIDDEN: usize = 256;

/// Velocity network over 64 image patch tokens plus `n_cond` conditioning
/// tokens, width 128, 4 blocks, full bidirectional attention.
///
/// Conditioning enters twice: as attendable prefix rows, and — whenever the
/// conditioning grid aligns with the patch grid (`n_cond` divides 64) — added
/// directly into each patch embedding. The additive path keeps image content
/// in every patch token's residual stream, so attention cannot learn to
/// ignore the conditioning wholesale (which otherwise collapses training
/// into an unconditional noise-decay solution on mostly-dark scenes).
pub struct PixelVelocityNet {
    patch_proj: Linear,
    cond_proj: Linear,
    pos: ParamId,
    time: TimeEmbed,
    blocks: Vec<TransformerBlock>,
    ln_f: LayerNorm,
    head: Linear,
    patch_rows: Arc<Vec<usize>>,
    cond_align: Option<Arc<Vec<usize>>>,
    pub n_cond: usize,
}

impl PixelVelocityNet {
    /// Registers parameters under "dec.".
    pub fn new<S: Scalar, R: Rng>(store: &mut ParamStore<S>, n_cond: usize, rng: &mut R) -> Self {
        let patch_proj = Linear::new(store, "dec.patch", PATCH_FEAT, DEC_WIDTH, rng);
        let cond_proj = Linear::new(store, "dec.cond", FEAT_DIM, DEC_WIDTH, rng);
        let pos = store.register("dec.pos", Tensor::randn(&[n_cond + N_TOKENS, DEC_WIDTH], 0.02, rng));
        let time = TimeEmbed::new(store, "dec.time", DEC_WIDTH, rng);
        let blocks = (0..DEC_BLOCKS)
            .map(|i| TransformerBlock::new(store, &format!("dec.b{i}"), DEC_WIDTH, DEC_HEADS, DEC_HIDDEN, rng))
            .collect();
        let ln_f = LayerNorm::new(store, "dec.lnf", DEC_WIDTH);
        let head = Linear::new(store, "dec.head", DEC_WIDTH, PATCH_FEAT, rng);
        let patch_rows = Arc::new((n_cond..n_cond + N_TOKENS).collect());
        let cond_align = (n_cond > 0 && N_TOKENS % n_cond == 0).then(|| {
            let rep = N_TOKENS / n_cond;
            Arc::new((0..N_TOKENS).map(|i| i / rep).collect::<Vec<_>>())
        });
        PixelVelocityNet { patch_proj, cond_proj, pos, time, blocks, ln_f, head, patch_rows, cond_align, n_cond }
    }

    /// `x_t`: noisy image in patch layout [64, 48]; `cond`: conditioning
    /// tokens [n_cond, 144]; returns predicted velocity in patch layout.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        bind: &mut Binding,
        x_t: NodeId,
        cond: NodeId,
        t: f64,
    ) -> Result<NodeId> {
        if g.value(cond).shape() != [self.n_cond, FEAT_DIM] {
            return Err(NumericsError::ShapeMismatch {
                context: "PixelVelocityNet::forward".into(),
                detail: format!("cond {:?}, want [{}, {FEAT_DIM}]", g.value(cond).shape(), self.n_cond),
            });
        }
        let c = self.cond_proj.forward(g, store, bind, cond)?;
        let mut p = self.patch_proj.forward(g, store, bind, x_t)?;
        if let Some(idx) = &self.cond_align {
            let aligned = g.gather_rows(c, idx.clone())?;
            p = g.add(p, aligned)?;
        }
        let mut h = g.concat_rows(&[c, p])?;
        let pos = bind.node(g, store, self.pos);
        h = g.add(h, pos)?;
        h = self.time.add_to_all(g, store, bind, h, t)?;
        for b in &self.blocks {
            h = b.forward(g, store, bind, h, None)?;
        }
        let patches = g.gather_rows(h, self.patch_rows.clone())?;
        let patches = self.ln_f.forward(g, store, bind, patches)?;
        self.head.forward(g, store, bind, patches)
    }
}

/// Frozen, seeded 2-layer feature extractor standing in for a perceptual
/// network: structured error in reconstructions moves its features.
pub struct PerceptualNet {
    fc1: Linear,
    fc2: Linear,
}

impl PerceptualNet {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7065_7263);
        let fc1 = Linear::new(store, "perc.fc1", PATCH_FEAT, 64, &mut rng);
        let fc2 = Linear::new(store, "perc.fc2", 64, 64, &mut rng);
        store.freeze_prefix("perc.");
        PerceptualNet { fc1, fc2 }
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        bind: &mut Binding,
        x: NodeId,
    ) -> Result<NodeId> {
        let h = self.fc1.forward(g, store, bind, x)?;
        let h = g.gelu(h)?;
        self.fc2.forward(g, store, bind, h)
    }
}

pub struct ReconLoss {
    pub total: NodeId,
    pub l_flow: NodeId,
    pub l_perc: NodeId,
}

/// Core of the stage-1 objective given an already-predicted velocity:
/// L = L_flow + lambda * L_perc with the one-step estimate
/// x_hat = x_t + (1 - t) * v_hat.
#[allow(clippy::too_many_arguments)]
pub fn recon_loss_with_velocity<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    bind: &mut Binding,
    perc: &PerceptualNet,
    v_hat: NodeId,
    x1p: &Tensor<S>,
    epsp: &Tensor<S>,
    t: f64,
    lambda: f64,
) -> Result<ReconLoss> {
    if lambda < 0.0 {
        return Err(NumericsError::InvalidArgument {
            context: "recon_loss".into(),
            detail: format!("lambda must be >= 0, got {lambda}"),
        });
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(NumericsError::InvalidArgument {
            context: "recon_loss".into(),
            detail: format!("t must lie in [0,1], got {t}"),
        });
    }
    let mut v_target = x1p.clone();
    {
        let vd = v_target.data_mut();
        for (v, &e) in vd.iter_mut().zip(epsp.data().iter()) {
            *v -= e;
        }
    }
    let v_target_n = g.constant(v_target);
    let l_flow = g.mse(v_hat, v_target_n)?;
    let x_t_n = g.constant(interpolate_tensors(x1p, epsp, t));
    let step = g.scale(v_hat, S::from_f64_c(1.0 - t))?;
    let x_hat = g.add(x_t_n, step)?;
    let x1_n = g.constant(x1p.clone());
    let f_hat = perc.forward(g, store, bind, x_hat)?;
    let f_ref = perc.forward(g, store, bind, x1_n)?;
    let l_perc = g.mse(f_hat, f_ref)?;
    let weighted = g.scale(l_perc, S::from_f64_c(lambda))?;
    let total = g.add(l_flow, weighted)?;
    Ok(ReconLoss { total, l_flow, l_perc })
}

/// x_t = t * x1 + (1 - t) * eps, computed outside the graph (both inputs
/// are training constants).
pub fn interpolate_tensors<S: Scalar>(x1: &Tensor<S>, eps: &Tensor<S>, t: f64) -> Tensor<S> {
    let ts = S::from_f64_c(t);
    let one_m_t = S::from_f64_c(1.0 - t);
    let mut out = x1.clone();
    let od = out.data_mut();
    for (x, &e) in od.iter_mut().zip(eps.data().iter()) {
        *x = ts * *x + one_m_t * e;
    }
    out
}

/// Full stage-1 loss: compress, decompress, predict velocity, score.
#[allow(clippy::too_many_arguments)]
pub fn recon_loss<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    bind: &mut Binding,
    model: &Stage1Model<S>,
    features: &Tensor<S>,
    x1: &Tensor<S>,
    eps: &Tensor<S>,
    t: f64,
    lambda: f64,
) -> Result<ReconLoss> {
    let x1p = patchify(x1)?;
    let epsp = patchify(eps)?;
    let z = g.constant(features.clone());
    let latent = model.comp.forward(g, store, bind, z)?;
    let cond = model.decomp.forward(g, store, bind, latent)?;
    let x_t_n = g.constant(interpolate_tensors(&x1p, &epsp, t));
    let v_hat = model.net.forward(g, store, bind, x_t_n, cond, t)?;
    recon_loss_with_velocity(g, store, bind, &model.perc, v_hat, &x1p, &epsp, t, lambda)
}

/// Stage-1 model bundle: frozen encoder, trainable compressor/decompressor
/// and velocity net, frozen perceptual net.
pub struct Stage1Model<S> {
    pub enc: Encoder<S>,
    pub comp: Compressor,
    pub decomp: Decompressor,
    pub net: PixelVelocityNet,
    pub perc: PerceptualNet,
}

pub fn build_stage1<S: Scalar>(
    store: &mut ParamStore<S>,
    comp_cfg: CompressorConfig,
    seed: u64,
    encoder_seed: u64,
) -> Result<Stage1Model<S>> {
    // the encoder gets its own seed: one frozen feature space shared by every
    // run, the way a single pretrained vision tower would be
    let mut enc_rng = ChaCha8Rng::seed_from_u64(encoder_seed ^ 0x656e_6300);
    let enc = Encoder::new(store, &mut enc_rng);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let comp = Compressor::new(store, comp_cfg, &mut rng)?;
    let decomp = Decompressor::new(store, comp_cfg.d, &mut rng);
    let net = PixelVelocityNet::new(store, comp_cfg.tokens_out(), &mut rng);
    let perc = PerceptualNet::new(store, seed);
    Ok(Stage1Model { enc, comp, decomp, net, perc })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Stage1Config {
    pub comp: CompressorConfig,
    pub encoder_seed: u64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub lambda_perc: f64,
    pub eval_every: usize,
    pub eval_images: usize,
    pub eval_euler_steps: usize,
    /// early-stop once held-out PSNR and checker both clear these
    pub target_psnr: Option<f64>,
    pub target_checker: Option<f64>,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            comp: CompressorConfig::default(),
            encoder_seed: 7,
            steps: 1500,
            batch: 4,
            lr: 1e-3,
            warmup: 100,
            lambda_perc: 0.5,
            eval_every: 100,
            eval_images: 10,
            eval_euler_steps: 16,
            target_psnr: Some(22.0),
            target_checker: Some(0.95),
        }
    }
}

pub struct Stage1Run {
    pub store: ParamStore<f32>,
    pub model: Stage1Model<f32>,
    pub norm: LatentNorm,
    pub records: Vec<TrainRecord>,
    pub final_mse: f64,
    pub final_psnr: f64,
    pub final_checker: f64,
    pub steps_run: usize,
    pub diverged_at: Option<usize>,
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return f64::INFINITY;
    }
    -10.0 * mse.log10()
}

pub fn image_mse<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let mut d = 0.0f64;
    for (x, y) in a.data().iter().zip(b.data().iter()) {
        let e = x.to_f64_c() - y.to_f64_c();
        d += e * e;
    }
    d / a.len() as f64
}

/// Reconstruction: integrate the learned pixel velocity field from noise,
/// conditioned on the (decompressed) latent of the input image. Output is a
/// flat [3072] image clamped to [0, 1].
pub fn reconstruct(
    model: &Stage1Model<f32>,
    store: &ParamStore<f32>,
    image: &Tensor<f32>,
    steps: usize,
    seed: u64,
) -> Result<Tensor<f32>> {
    let feats = model.enc.encode(store, image)?;
    let cond = condition_tokens(model, store, &feats)?;
    decode_from_condition(model, store, &cond, steps, seed)
}

/// compress + decompress an encoder feature grid into decoder conditioning.
pub fn condition_tokens(
    model: &Stage1Model<f32>,
    store: &ParamStore<f32>,
    features: &Tensor<f32>,
) -> Result<Tensor<f32>> {
    let mut g: Graph<f32> = Graph::new();
    let mut bind = Binding::new(store);
    let z = g.constant(features.clone());
    let latent = model.comp.forward(&mut g, store, &mut bind, z)?;
    let cond = model.decomp.forward(&mut g, store, &mut bind, latent)?;
    Ok(g.value(cond).clone())
}

/// Decoder conditioning straight from a latent (used by the stage-2
/// pathways at sampling time, after destandardization).
pub fn condition_from_latent(
    model: &Stage1Model<f32>,
    store: &ParamStore<f32>,
    latent: &Tensor<f32>,
) -> Result<Tensor<f32>> {
    let mut g: Graph<f32> = Graph::new();
    let mut bind = Binding::new(store);
    let z = g.constant(latent.clone());
    let cond = model.decomp.forward(&mut g, store, &mut bind, z)?;
    Ok(g.value(cond).clone())
}

/// Euler-integrate the pixel velocity field from seeded noise given fixed
/// conditioning tokens; returns a clamped [3072] image.
pub fn decode_from_condition(
    model: &Stage1Model<f32>,
    store: &ParamStore<f32>,
    cond: &Tensor<f32>,
    steps: usize,
    seed: u64,
) -> Result<Tensor<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7069_7865);
    let x0 = Tensor::<f32>::randn(&[N_TOKENS, PATCH_FEAT], 1.0, &mut rng);
    let mut v_fn = |x: &Tensor<f32>, t: f64| -> Result<Tensor<f32>> {
        let mut g: Graph<f32> = Graph::new();
        let mut bind = Binding::new(store);
        let xn = g.constant(x.clone());
        let cn = g.constant(cond.clone());
        let v = model.net.forward(&mut g, store, &mut bind, xn, cn, t)?;
        Ok(g.value(v).clone())
    };
    let x1p = euler_integrate(&mut v_fn, &x0, steps)?;
    let flat = unpatchify(&x1p)?;
    Ok(flat.map(|v| v.clamp(0.0, 1.0)))
}

/// Joint stage-1 training of compressor, decompressor, and pixel decoder
/// with the encoder frozen. Deterministic per seed. On divergence (loss
/// above 1e3 or a non-finite forward/backward), training stops and the
/// parameters roll back to the last evaluation snapshot.
pub fn train_stage1(
    train: &[(Scene, Vec<usize>)],
    val: &[(Scene, Vec<usize>)],
    cfg: &Stage1Config,
    seed: u64,
) -> Result<Stage1Run> {
    let mut store: ParamStore<f32> = ParamStore::new();
    let model = build_stage1(&mut store, cfg.comp, seed, cfg.encoder_seed)?;
    let images: Vec<Tensor<f32>> = train.iter().map(|(s, _)| render(s)).collect();
    let feats = model.enc.encode_all(&store, &images)?;
    let val_images: Vec<Tensor<f32>> = val.iter().map(|(s, _)| render(s)).collect();

    let mut opt = AdamW::new(AdamWConfig { lr: cfg.lr, weight_decay: 0.0, ..AdamWConfig::default() }, &store);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7374_6167);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut cursor = order.len(); // trigger shuffle on first use
    let mut records = Vec::new();
    let mut snapshot: Vec<(ParamId, Tensor<f32>)> =
        store.ids().map(|id| (id, store.get(id).clone())).collect();
    let mut diverged_at = None;
    let mut steps_run = 0;
    let (mut best_mse, mut best_psnr, mut best_checker) = (f64::INFINITY, 0.0f64, 0.0f64);

    'train: for step in 0..cfg.steps {
        let mut accum = GradAccum::new(&store);
        let mut flow_sum = 0.0f64;
        let mut perc_sum = 0.0f64;
        for _ in 0..cfg.batch {
            if cursor >= order.len() {
                for i in (1..order.len()).rev() {
                    let j = rng.gen_range(0..=i);
                    order.swap(i, j);
                }
                cursor = 0;
            }
            let idx = order[cursor];
            cursor += 1;
            let t: f64 = rng.gen();
            let eps = Tensor::<f32>::randn(&[IMG_LEN], 1.0, &mut rng);
            let mut g: Graph<f32> = Graph::new();
            let mut bind = Binding::new(&store);
            let loss = match recon_loss(
                &mut g, &store, &mut bind, &model, &feats[idx], &images[idx], &eps, t, cfg.lambda_perc,
            ) {
                Ok(l) => l,
                Err(NumericsError::NonFinite { .. }) => {
                    diverged_at = Some(step);
                    break 'train;
                }
                Err(e) => return Err(e),
            };
            let total_v = g.scalar_value(loss.total) as f64;
            flow_sum += g.scalar_value(loss.l_flow) as f64;
            perc_sum += g.scalar_value(loss.l_perc) as f64;
            if !total_v.is_finite() || total_v > 1e3 {
                diverged_at = Some(step);
                break 'train;
            }
            let grads = match g.backward(loss.total) {
                Ok(gr) => gr,
                Err(NumericsError::NonFinite { .. }) => {
                    diverged_at = Some(step);
                    break 'train;
                }
                Err(e) => return Err(e),
            };
            accum.add(&bind.collect(&grads, &store));
        }
        if diverged_at.is_some() {
            break;
        }
        opt.set_lr(lr_at(cfg.lr, cfg.warmup as u64, step as u64));
        opt.step(&mut store, &accum.finalize(cfg.batch))?;
        steps_run = step + 1;

        let due = (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps;
        if due && cfg.eval_images > 0 {
            let k = cfg.eval_images.min(val_images.len());
            let mut mse_sum = 0.0;
            let mut check_sum = 0.0;
            for (i, vi) in val_images.iter().take(k).enumerate() {
                let rec = reconstruct(&model, &store, vi, cfg.eval_euler_steps, seed ^ ((i as u64) << 8))?;
                mse_sum += image_mse(&rec, vi);
                check_sum += check_image(&rec, &val[i].1).map_err(|e| NumericsError::InvalidArgument {
                    context: "train_stage1 eval".into(),
                    detail: e.to_string(),
                })?;
            }
            let mse = mse_sum / k as f64;
            let checker = check_sum / k as f64;
            let psnr = psnr_from_mse(mse);
            let mut rec = TrainRecord::at(step + 1);
            rec.l_flow = Some(flow_sum / cfg.batch as f64);
            rec.l_perc = Some(perc_sum / cfg.batch as f64);
            rec.mse = Some(mse);
            rec.psnr = Some(psnr);
            rec.checker = Some(checker);
            records.push(rec);
            best_mse = mse;
            best_psnr = psnr;
            best_checker = checker;
            snapshot = store.ids().map(|id| (id, store.get(id).clone())).collect();
            if let (Some(tp), Some(tc)) = (cfg.target_psnr, cfg.target_checker) {
                if psnr > tp && checker >= tc {
                    break;
                }
            }
        }
    }

    if diverged_at.is_some() {
        for (id, t) in snapshot {
            store.set(id, t);
        }
    }

    // standardization stats for stage-2 flow targets
    let mut latents: Vec<Tensor<f32>> = Vec::with_capacity(feats.len());
    for f in &feats {
        latents.push(model.comp.compress_value(&store, f)?);
    }
    let norm = LatentNorm::fit(&latents)?;

    Ok(Stage1Run {
        store,
        model,
        norm,
        records,
        final_mse: best_mse,
        final_psnr: best_psnr,
        final_checker: best_checker,
        steps_run,
        diverged_at,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compressor::Variant;
    use crate::toydata::{generate_corpus, Split};

    fn tiny_model(cfg: CompressorConfig) -> (ParamStore<f64>, Stage1Model<f64>) {
        let mut store = ParamStore::new();
        let model = build_stage1(&mut store, cfg, 11, 7).unwrap();
        (store, model)
    }

    #[test]
    fn velocity_net_output_shape_and_determinism() {
        let (store, model) = tiny_model(CompressorConfig::default());
        let corpus = generate_corpus(1, 1, Split::All);
        let img: Tensor<f64> = render(&corpus[0].0);
        let feats = model.enc.encode(&store, &img).unwrap();
        let run = || {
            let mut g: Graph<f64> = Graph::new();
            let mut bind = Binding::new(&store);
            let z = g.constant(feats.clone());
            let latent = model.comp.forward(&mut g, &store, &mut bind, z).unwrap();
            let cond = model.decomp.forward(&mut g, &store, &mut bind, latent).unwrap();
            let x = g.constant(patchify(&img).unwrap());
            let v = model.net.forward(&mut g, &store, &mut bind, x, cond, 0.3).unwrap();
            g.value(v).clone()
        };
        let a = run();
        let b = run();
        assert_eq!(a.shape(), &[N_TOKENS, PATCH_FEAT]);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn perfect_velocity_gives_zero_loss() {
        let (store, model) = tiny_model(CompressorConfig::default());
        let corpus = generate_corpus(2, 1, Split::All);
        let img: Tensor<f64> = render(&corpus[0].0);
        let x1p = patchify(&img).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let epsp = Tensor::<f64>::randn(&[N_TOKENS, PATCH_FEAT], 1.0, &mut rng);
        let mut g: Graph<f64> = Graph::new();
        let mut bind = Binding::new(&store);
        let mut v_t = x1p.clone();
        {
            let vd = v_t.data_mut();
            for (v, &e) in vd.iter_mut().zip(epsp.data().iter()) {
                *v -= e;
            }
        }
        let v_hat = g.constant(v_t);
        let loss =
            recon_loss_with_velocity(&mut g, &store, &mut bind, &model.perc, v_hat, &x1p, &epsp, 0.37, 0.5)
                .unwrap();
        assert!(g.scalar_value(loss.total).abs() < 1e-12);
        assert!(g.scalar_value(loss.l_flow).abs() < 1e-12);
        assert!(g.scalar_value(loss.l_perc).abs() < 1e-12);
    }

    #[test]
    fn negative_lambda_and_bad_t_are_rejected() {
        let (store, model) = tiny_model(CompressorConfig::default());
        let mut g: Graph<f64> = Graph::new();
        let mut bind = Binding::new(&store);
        let x1p = Tensor::<f64>::zeros(&[N_TOKENS, PATCH_FEAT]);
        let epsp = Tensor::<f64>::zeros(&[N_TOKENS, PATCH_FEAT]);
        let v = g.constant(Tensor::zeros(&[N_TOKENS, PATCH_FEAT]));
        assert!(
            recon_loss_with_velocity(&mut g, &store, &mut bind, &model.perc, v, &x1p, &epsp, 0.5, -0.1)
                .is_err()
        );
        assert!(
            recon_loss_with_velocity(&mut g, &store, &mut bind, &model.perc, v, &x1p, &epsp, 1.5, 0.5)
                .is_err()
        );
    }

    #[test]
    fn loss_decomposition_is_exact() {
        let (store, model) = tiny_model(CompressorConfig::default());
        let corpus = generate_corpus(4, 1, Split::All);
        let img: Tensor<f64> = render(&corpus[0].0);
        let feats = model.enc.encode(&store, &img).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let eps = Tensor::<f64>::randn(&[IMG_LEN], 1.0, &mut rng);
        let eval = |lambda: f64| -> (f64, f64, f64) {
            let mut g: Graph<f64> = Graph::new();
            let mut bind = Binding::new(&store);
            let l = recon_loss(&mut g, &store, &mut bind, &model, &feats, &img, &eps, 0.4, lambda).unwrap();
            (g.scalar_value(l.total), g.scalar_value(l.l_flow), g.scalar_value(l.l_perc))
        };
        let (t0, f0, _) = eval(0.0);
        assert_eq!(t0, f0, "lambda=0 must equal pure flow loss");
        let (t5, f5, p5) = eval(0.5);
        assert_eq!(t5, f5 + 0.5 * p5, "decomposition must be exact");
        assert!(p5 > 0.0);
    }

    #[test]
    fn recon_loss_gradient_matches_finite_differences_on_compressor() {
        let cfg = CompressorConfig { variant: Variant::Mlp, d: 4, pool: 1 };
        let (store, model) = tiny_model(cfg);
        let corpus = generate_corpus(6, 1, Split::All);
        let img: Tensor<f64> = render(&corpus[0].0);
        let feats = model.enc.encode(&store, &img).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let eps = Tensor::<f64>::randn(&[IMG_LEN], 1.0, &mut rng);
        let p_ids = [store.find("comp.fc2.w").unwrap(), store.find("comp.fc1.b").unwrap()];
        let init: Vec<Tensor<f64>> = p_ids.iter().map(|&id| store.get(id).clone()).collect();
        let max_err = crate::gradcheck::check_gradients(
            &|g, leaves: &[NodeId]| {
                let mut bind = Binding::new(&store);
                bind.node_override(p_ids[0], leaves[0]);
                bind.node_override(p_ids[1], leaves[1]);
                let l = recon_loss(g, &store, &mut bind, &model, &feats, &img, &eps, 0.35, 0.5)?;
                Ok(l.total)
            },
            &init,
            1e-5,
            4,
            99,
        )
        .unwrap();
        assert!(max_err < 1e-4, "rel err {max_err}");
    }

    #[test]
    fn one_step_moves_compressor_and_keeps_encoder_frozen() {
        let train = generate_corpus(10, 110, Split::Train);
        let val = generate_corpus(9, 4, Split::Val);
        let cfg = Stage1Config {
            comp: CompressorConfig { variant: Variant::Mlp, d: 4, pool: 1 },
            steps: 2,
            batch: 2,
            eval_every: 1000,
            eval_images: 0,
            target_psnr: None,
            target_checker: None,
            ..Stage1Config::default()
        };
        let enc_hash_fixture = {
            let mut s: ParamStore<f32> = ParamStore::new();
            build_stage1(&mut s, cfg.comp, 42, 7).unwrap();
            s.hash_prefix("enc.")
        };
        let run = train_stage1(&train, &val, &cfg, 42).unwrap();
        assert_eq!(run.store.hash_prefix("enc."), enc_hash_fixture, "encoder must stay frozen");
        let mut init_store: ParamStore<f32> = ParamStore::new();
        build_stage1(&mut init_store, cfg.comp, 42, 7).unwrap();
        let moved = run
            .store
            .ids()
            .filter(|&id| run.store.name(id).starts_with("comp."))
            .any(|id| run.store.get(id).max_abs_diff(init_store.get(id)) > 0.0);
        assert!(moved, "compressor must receive nonzero updates");
        assert!(run.diverged_at.is_none());
    }

    #[test]
    fn huge_lr_divergence_rolls_back_to_finite_params() {
        let train = generate_corpus(12, 110, Split::Train);
        let val = generate_corpus(13, 4, Split::Val);
        let cfg = Stage1Config {
            comp: CompressorConfig { variant: Variant::Mlp, d: 4, pool: 1 },
            steps: 40,
            batch: 1,
            lr: 1e6,
            warmup: 0,
            eval_every: 1000,
            eval_images: 0,
            target_psnr: None,
            target_checker: None,
            ..Stage1Config::default()
        };
        let run = train_stage1(&train, &val, &cfg, 7).unwrap();
        assert!(run.diverged_at.is_some(), "lr=1e6 must diverge");
        for id in run.store.ids() {
            assert!(run.store.get(id).all_finite());
        }
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let train = generate_corpus(14, 110, Split::Train);
        let val = generate_corpus(15, 4, Split::Val);
        let cfg = Stage1Config {
            comp: CompressorConfig { variant: Variant::Mlp, d: 4, pool: 1 },
            steps: 3,
            batch: 2,
            eval_every: 1000,
            eval_images: 0,
            target_psnr: None,
            target_checker: None,
            ..Stage1Config::default()
        };
        let a = train_stage1(&train, &val, &cfg, 21).unwrap();
        let b = train_stage1(&train, &val, &cfg, 21).unwrap();
        assert_eq!(a.store.hash_prefix(""), b.store.hash_prefix(""));
    }

    #[test]
    fn reconstruct_shape_range_and_determinism() {
        let train = generate_corpus(16, 110, Split::Train);
        let val = generate_corpus(17, 4, Split::Val);
        let cfg = Stage1Config {
            comp: CompressorConfig { variant: Variant::Mlp, d: 4, pool: 1 },
            steps: 1,
            batch: 1,
            eval_every: 1000,
            eval_images: 0,
            target_psnr: None,
            target_checker: None,
            ..Stage1Config::default()
        };
        let run = train_stage1(&train, &val, &cfg, 30).unwrap();
        let img = render::<f32>(&val[0].0);
        let rec = reconstruct(&run.model, &run.store, &img, 4, 5).unwrap();
        assert_eq!(rec.shape(), &[IMG_LEN]);
        assert!(rec.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let rec2 = reconstruct(&run.model, &run.store, &img, 4, 5).unwrap();
        assert_eq!(rec.data(), rec2.data());
    }
}
