//! Pathway II: learnable queries prompting a frozen backbone. A small set of
//! learned query vectors is appended to the prompt and run through a frozen
//! text-pretrained trunk; the query outputs, after a trainable connector,
//! condition a width-matched flow network that predicts latent velocities.
//! Only the queries, connector, and predictor train.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{condition_from_latent, decode_from_condition, Stage1Run};
use crate::graph::{Graph, NodeId};
use crate::metrics::TrainRecord;
use crate::nn::{LayerNorm, Linear, TimeEmbed, TransformerBlock};
use crate::optim::{lr_at, AdamW, AdamWConfig};
use crate::params::{Binding, GradAccum, ParamId, ParamStore};
use crate::sampling::{euler_integrate, guide, interpolate, target_velocity, SamplerConfig};
use crate::scalar::Scalar;
use crate::tensor::{NumericsError, Result, Tensor};
use crate::toydata::vocab;
use crate::unified::{
    null_caption, BlockKind, LatentBlock, MixedSequence, Tag, UnifiedData, UnifiedModel, UNI_HEADS,
    UNI_HIDDEN, UNI_WIDTH,
};

pub const M_QUERIES: usize = 16;
pub const CONN_BLOCKS: usize = 2;
pub const PRED_BLOCKS: usize = 4;

/// Conditional flow network over latent tokens: conditioning rows (the
/// connector outputs) and noisy latent rows share one bidirectional trunk,
/// sized to match the unified pathway's trunk for a fair comparison.
pub struct LatentPredictor {
    cond_proj: Linear,
    lat_in: Linear,
    pos: ParamId,
    time: TimeEmbed,
    blocks: Vec<TransformerBlock>,
    lnf: LayerNorm,
    head: Linear,
    lat_rows: Arc<Vec<usize>>,
    n: usize,
    d: usize,
}

impl LatentPredictor {
    fn new<S: Scalar, R: Rng>(store: &mut ParamStore<S>, d: usize, m: usize, n: usize, rng: &mut R) -> Self {
        let cond_proj = Linear::new(store, "q.p.cond", UNI_WIDTH, UNI_WIDTH, rng);
        let lat_in = Linear::new(store, "q.p.lat_in", d, UNI_WIDTH, rng);
        let pos = store.register("q.p.pos", Tensor::randn(&[m + n, UNI_WIDTH], 0.02, rng));
        let time = TimeEmbed::new(store, "q.p.time", UNI_WIDTH, rng);
        let blocks = (0..PRED_BLOCKS)
            .map(|i| TransformerBlock::new(store, &format!("q.p.b{i}"), UNI_WIDTH, UNI_HEADS, UNI_HIDDEN, rng))
            .collect();
        let lnf = LayerNorm::new(store, "q.p.lnf", UNI_WIDTH);
        let head = Linear::new(store, "q.p.head", UNI_WIDTH, d, rng);
        let lat_rows = Arc::new((m..m + n).collect());
        LatentPredictor { cond_proj, lat_in, pos, time, blocks, lnf, head, lat_rows, n, d }
    }

    fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        bind: &mut Binding,
        cond: NodeId,
        z_t: &Tensor<S>,
        t: f64,
    ) -> Result<NodeId> {
        if z_t.shape() != [self.n, self.d] {
            return Err(NumericsError::ShapeMismatch {
                context: "LatentPredictor::forward".into(),
                detail: format!("latent state {:?}, expected [{}, {}]", z_t.shape(), self.n, self.d),
            });
        }
        let zc = g.constant(z_t.clone());
        let zl = self.lat_in.forward(g, store, bind, zc)?;
        let cp = self.cond_proj.forward(g, store, bind, cond)?;
        let x = g.concat_rows(&[cp, zl])?;
        let pos = bind.node(g, store, self.pos);
        let x = g.add(x, pos)?;
        let mut h = self.time.add_to_all(g, store, bind, x, t)?;
        for blk in &self.blocks {
            h = blk.forward(g, store, bind, h, None)?;
        }
        let hv = g.gather_rows(h, Arc::clone(&self.lat_rows))?;
        let hv = self.lnf.forward(g, store, bind, hv)?;
        self.head.forward(g, store, bind, hv)
    }
}

/// The frozen backbone plus everything that trains: query vectors, a
/// 2-block connector, and the latent flow predictor.
pub struct QueryModel {
    pub backbone: UnifiedModel,
    query: ParamId,
    conn: Vec<TransformerBlock>,
    pred: LatentPredictor,
    pub m: usize,
    pub n: usize,
    pub d: usize,
}

impl QueryModel {
    /// Registers the backbone under "uni." (expected to be overwritten from
    /// a pretrained store and frozen) and the trainable pieces under "q.".
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        d: usize,
        n: usize,
        m: usize,
        rng: &mut R,
    ) -> Self {
        let backbone = UnifiedModel::new(store, d, rng);
        let query = store.register("q.query", Tensor::randn(&[m, UNI_WIDTH], 0.02, rng));
        let conn = (0..CONN_BLOCKS)
            .map(|i| TransformerBlock::new(store, &format!("q.c{i}"), UNI_WIDTH, UNI_HEADS, UNI_HIDDEN, rng))
            .collect();
        let pred = LatentPredictor::new(store, d, m, n, rng);
        QueryModel { backbone, query, conn, pred, m, n, d }
    }

    /// Prompt -> frozen backbone with appended queries -> connector.
    /// Returns the [m, width] conditioning rows.
    pub fn extract_condition<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        bind: &mut Binding,
        prompt: &MixedSequence<S>,
    ) -> Result<NodeId> {
        let qt = bind.node(g, store, self.query);
        let mut h = self.backbone.forward_with_queries(g, store, bind, prompt, qt, self.m)?;
        for blk in &self.conn {
            h = blk.forward(g, store, bind, h, None)?;
        }
        Ok(h)
    }

    /// Velocity prediction at latent state z_t and time t, conditioned on
    /// the prompt.
    pub fn velocity<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        bind: &mut Binding,
        prompt: &MixedSequence<S>,
        z_t: &Tensor<S>,
        t: f64,
    ) -> Result<NodeId> {
        let cond = self.extract_condition(g, store, bind, prompt)?;
        self.pred.forward(g, store, bind, cond, z_t, t)
    }
}

/// A caption as a pure prompt: no CE targets, no latent blocks.
pub fn text_prompt<S: Scalar>(caption: &[usize]) -> MixedSequence<S> {
    MixedSequence {
        tags: vec![Tag::Text; caption.len()],
        tokens: caption.iter().copied().enumerate().collect(),
        blocks: vec![],
        ce: vec![],
    }
}

/// An editing prompt: the clean source latents as an image block followed
/// by the instruction tokens, [BOI, src * n, EOI, instr...].
pub fn edit_prompt<S: Scalar>(src_lat_std: &Tensor<S>, instr: &[usize]) -> MixedSequence<S> {
    let n = src_lat_std.rows();
    let mut tags = vec![Tag::Boi];
    tags.extend(std::iter::repeat(Tag::Latent).take(n));
    tags.push(Tag::Eoi);
    tags.extend(std::iter::repeat(Tag::Text).take(instr.len()));
    let mut tokens: Vec<(usize, usize)> = vec![(0, vocab::BOI), (n + 1, vocab::EOI)];
    for (k, &id) in instr.iter().enumerate() {
        tokens.push((n + 2 + k, id));
    }
    let block = LatentBlock {
        start: 1,
        t: 1.0,
        input: src_lat_std.clone(),
        kind: BlockKind::CondLatent,
        v_target: None,
    };
    MixedSequence { tags, tokens, blocks: vec![block], ce: vec![] }
}

/// Flow-matching loss for one (prompt, clean latent) pair at time t.
pub fn flow_loss<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    bind: &mut Binding,
    model: &QueryModel,
    prompt: &MixedSequence<S>,
    z1_std: &Tensor<S>,
    eps: &Tensor<S>,
    t: f64,
) -> Result<NodeId> {
    let z_t = interpolate(z1_std, eps, t)?;
    let v_t = target_velocity(z1_std, eps)?;
    let v_hat = model.velocity(g, store, bind, prompt, &z_t, t)?;
    let tgt = g.constant(v_t);
    g.mse(v_hat, tgt)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QueriesConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    pub m: usize,
    pub cond_dropout: f64,
    /// fraction of training samples drawn from the editing task
    pub edit_frac: f64,
    pub eval_every: usize,
    pub tau: Option<f64>,
}

impl Default for QueriesConfig {
    fn default() -> Self {
        QueriesConfig {
            steps: 1200,
            batch: 4,
            lr: 3e-4,
            warmup: 100,
            weight_decay: 0.01,
            m: M_QUERIES,
            cond_dropout: 0.1,
            edit_frac: 0.15,
            eval_every: 25,
            tau: None,
        }
    }
}

pub struct QueriesRun {
    pub store: ParamStore<f32>,
    pub model: QueryModel,
    pub records: Vec<TrainRecord>,
    pub eval_curve: Vec<(usize, f64)>,
    pub steps_to_tau: Option<usize>,
    pub steps_run: usize,
    pub diverged_at: Option<usize>,
}

/// Held-out flow loss on the shared eval tuples, caption prompts only.
pub fn eval_flow_loss_queries(
    model: &QueryModel,
    store: &ParamStore<f32>,
    data: &UnifiedData,
) -> Result<f64> {
    let mut sum = 0.0;
    for (caption, z1, eps, t) in &data.eval {
        let prompt = text_prompt::<f32>(caption);
        let mut g: Graph<f32> = Graph::new();
        let mut bind = Binding::new(store);
        let loss = flow_loss(&mut g, store, &mut bind, model, &prompt, z1, eps, *t)?;
        sum += g.scalar_value(loss) as f64;
    }
    Ok(sum / data.eval.len() as f64)
}

/// Trains queries + connector + predictor against a frozen pretrained
/// backbone (a "uni."-parameter store from the unified pathway's text or
/// vision-language pretraining).
pub fn train_queries(
    data: &UnifiedData,
    cfg: &QueriesConfig,
    seed: u64,
    backbone: &ParamStore<f32>,
) -> Result<QueriesRun> {
    if data.captions.is_empty() {
        return Err(NumericsError::InvalidArgument {
            context: "train_queries".into(),
            detail: "empty training corpus".into(),
        });
    }
    let mut store: ParamStore<f32> = ParamStore::new();
    let mut rng_init = ChaCha8Rng::seed_from_u64(seed);
    let model = QueryModel::new(&mut store, data.d, data.n, cfg.m, &mut rng_init);
    for id in backbone.ids().collect::<Vec<_>>() {
        let name = backbone.name(id).to_string();
        let dst = store.find(&name).ok_or_else(|| NumericsError::InvalidArgument {
            context: "train_queries".into(),
            detail: format!("backbone store has unknown parameter {name}"),
        })?;
        store.set(dst, backbone.get(id).clone());
    }
    let frozen = store.freeze_prefix("uni.");
    debug_assert!(frozen > 0);

    let mut opt = AdamW::new(
        AdamWConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..AdamWConfig::default() },
        &store,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7175_6572);
    let mut records = Vec::new();
    let mut eval_curve = Vec::new();
    let mut steps_to_tau = None;
    let mut diverged_at = None;
    let mut steps_run = 0usize;
    let mut snapshot: Vec<(ParamId, Tensor<f32>)> =
        store.ids().map(|id| (id, store.get(id).clone())).collect();

    'train: for step in 0..cfg.steps {
        let mut accum = GradAccum::new(&store);
        let mut fm_sum = 0.0f64;
        for _ in 0..cfg.batch {
            let use_edit = !data.edits.is_empty() && rng.gen::<f64>() < cfg.edit_frac;
            let (prompt, z1) = if use_edit {
                let i = rng.gen_range(0..data.edits.len());
                let (src, instr, tgt) = &data.edits[i];
                (edit_prompt::<f32>(src, instr), tgt.clone())
            } else {
                let i = rng.gen_range(0..data.captions.len());
                let drop: f64 = rng.gen();
                let caption: Vec<usize> = if drop < cfg.cond_dropout {
                    null_caption()
                } else {
                    data.captions[i].clone()
                };
                (text_prompt::<f32>(&caption), data.latents[i].clone())
            };
            let t: f64 = rng.gen();
            let eps = Tensor::<f32>::randn(&[data.n, data.d], 1.0, &mut rng);
            let mut g: Graph<f32> = Graph::new();
            let mut bind = Binding::new(&store);
            let loss = match flow_loss(&mut g, &store, &mut bind, &model, &prompt, &z1, &eps, t) {
                Ok(l) => l,
                Err(NumericsError::NonFinite { .. }) => {
                    diverged_at = Some(step);
                    break 'train;
                }
                Err(e) => return Err(e),
            };
            let v = g.scalar_value(loss) as f64;
            if !v.is_finite() || v > 1e3 {
                diverged_at = Some(step);
                break 'train;
            }
            fm_sum += v;
            let grads = match g.backward(loss) {
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

        if (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps {
            let fm = eval_flow_loss_queries(&model, &store, data)?;
            eval_curve.push((step + 1, fm));
            let mut rec = TrainRecord::at(step + 1);
            rec.l_fm_eval = Some(fm);
            rec.l_flow = Some(fm_sum / cfg.batch as f64);
            records.push(rec);
            snapshot = store.ids().map(|id| (id, store.get(id).clone())).collect();
            if let Some(tau) = cfg.tau {
                if fm <= tau && steps_to_tau.is_none() {
                    steps_to_tau = Some(step + 1);
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

    Ok(QueriesRun { store, model, records, eval_curve, steps_to_tau, steps_run, diverged_at })
}

// ---------------------------------------------------------------------------
// sampling
// ---------------------------------------------------------------------------

fn predict_velocity(
    model: &QueryModel,
    store: &ParamStore<f32>,
    prompt: &MixedSequence<f32>,
    z: &Tensor<f32>,
    t: f64,
) -> Result<Tensor<f32>> {
    let mut g: Graph<f32> = Graph::new();
    let mut bind = Binding::new(store);
    let v = model.velocity(&mut g, store, &mut bind, prompt, z, t)?;
    Ok(g.value(v).clone())
}

/// Samples a standardized latent from a caption prompt, with optional
/// classifier-free guidance against the null caption.
pub fn generate_latent_queries(
    model: &QueryModel,
    store: &ParamStore<f32>,
    caption: &[usize],
    sampler: &SamplerConfig,
) -> Result<Tensor<f32>> {
    sampler.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed ^ 0x7175_6721);
    let z0 = Tensor::<f32>::randn(&[model.n, model.d], 1.0, &mut rng);
    let prompt = text_prompt::<f32>(caption);
    let uncond = text_prompt::<f32>(&null_caption());
    let guided = (sampler.guidance - 1.0).abs() > 1e-12;
    let mut v_fn = |z: &Tensor<f32>, t: f64| -> Result<Tensor<f32>> {
        let v_c = predict_velocity(model, store, &prompt, z, t)?;
        if !guided {
            return Ok(v_c);
        }
        let v_u = predict_velocity(model, store, &uncond, z, t)?;
        guide(&v_u, &v_c, sampler.guidance)
    };
    euler_integrate(&mut v_fn, &z0, sampler.steps)
}

/// Samples an edited latent from a source-latent-plus-instruction prompt.
pub fn edit_latent_queries(
    model: &QueryModel,
    store: &ParamStore<f32>,
    src_lat_std: &Tensor<f32>,
    instr: &[usize],
    sampler: &SamplerConfig,
) -> Result<Tensor<f32>> {
    sampler.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed ^ 0x7165_6421);
    let z0 = Tensor::<f32>::randn(&[model.n, model.d], 1.0, &mut rng);
    let prompt = edit_prompt::<f32>(src_lat_std, instr);
    let mut v_fn = |z: &Tensor<f32>, t: f64| -> Result<Tensor<f32>> {
        predict_velocity(model, store, &prompt, z, t)
    };
    euler_integrate(&mut v_fn, &z0, sampler.steps)
}

/// Full text-to-image through the frozen stage-1 stack.
pub fn generate_image_queries(
    stage1: &Stage1Run,
    model: &QueryModel,
    store: &ParamStore<f32>,
    caption: &[usize],
    sampler: &SamplerConfig,
) -> Result<Tensor<f32>> {
    let lat_std = generate_latent_queries(model, store, caption, sampler)?;
    let lat = stage1.norm.destandardize(&lat_std);
    let cond = condition_from_latent(&stage1.model, &stage1.store, &lat)?;
    decode_from_condition(&stage1.model, &stage1.store, &cond, sampler.steps, sampler.seed)
}

/// Full image editing through the frozen stage-1 stack.
pub fn edit_image_queries(
    stage1: &Stage1Run,
    model: &QueryModel,
    store: &ParamStore<f32>,
    src_image: &Tensor<f32>,
    instr: &[usize],
    sampler: &SamplerConfig,
) -> Result<Tensor<f32>> {
    let feats = stage1.model.enc.encode(&stage1.store, src_image)?;
    let lat = stage1.model.comp.compress_value(&stage1.store, &feats)?;
    let lat_std = stage1.norm.standardize(&lat);
    let out_std = edit_latent_queries(model, store, &lat_std, instr, sampler)?;
    let out = stage1.norm.destandardize(&out_std);
    let cond = condition_from_latent(&stage1.model, &stage1.store, &out)?;
    decode_from_condition(&stage1.model, &stage1.store, &cond, sampler.steps, sampler.seed)
}
