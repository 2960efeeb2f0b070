//! Pathway I: one transformer over mixed text/latent sequences. Text slots
//! train with next-token cross-entropy under causal masking; image latent
//! slots train with flow matching under bidirectional attention inside each
//! image block. One set of trunk weights serves text-only, text-to-image,
//! image-to-text, and editing sequences.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{condition_from_latent, decode_from_condition, Stage1Run};
use crate::encoder::FEAT_DIM;
use crate::graph::{Graph, NodeId};
use crate::metrics::TrainRecord;
use crate::nn::{LayerNorm, Linear, TimeEmbed, TransformerBlock};
use crate::optim::{lr_at, AdamW, AdamWConfig};
use crate::params::{Binding, GradAccum, ParamId, ParamStore};
use crate::sampling::{euler_integrate, guide, interpolate, target_velocity, SamplerConfig};
use crate::scalar::Scalar;
use crate::tensor::{NumericsError, Result, Tensor};
use crate::toydata::{make_edit_pairs, render, vocab, Scene};

pub const UNI_WIDTH: usize = 128;
pub const UNI_BLOCKS: usize = 4;
pub const UNI_HEADS: usize = 4;
pub const UNI_HIDDEN: usize = 256;
pub const MAX_SEQ: usize = 160;

/// Slot kinds in a mixed sequence. BOI/EOI delimit an image block and are
/// themselves text-like (causal).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tag {
    Text,
    Boi,
    Eoi,
    Latent,
}

/// Modality-aware attention mask over a tag sequence, row-major S x S,
/// entry (i, j) = true when position i may attend to position j.
///
/// Rules: text-like positions attend causally (j <= i). A latent slot
/// attends to every position strictly before its block's BOI plus every
/// latent slot of its own block (bidirectional), and nothing else.
pub fn build_mask(tags: &[Tag]) -> Result<Arc<Vec<bool>>> {
    let s = tags.len();
    let bad = |detail: String| NumericsError::InvalidArgument { context: "build_mask".into(), detail };
    let mut blocks: Vec<(usize, usize)> = Vec::new();
    let mut open: Option<usize> = None;
    for (i, &tag) in tags.iter().enumerate() {
        match tag {
            Tag::Boi => {
                if open.is_some() {
                    return Err(bad(format!("nested BOI at {i}")));
                }
                open = Some(i);
            }
            Tag::Eoi => match open.take() {
                Some(b) => blocks.push((b, i)),
                None => return Err(bad(format!("EOI without BOI at {i}"))),
            },
            Tag::Latent => {
                if open.is_none() {
                    return Err(bad(format!("latent outside image block at {i}")));
                }
            }
            Tag::Text => {
                if open.is_some() {
                    return Err(bad(format!("text token inside image block at {i}")));
                }
            }
        }
    }
    if let Some(b) = open {
        return Err(bad(format!("BOI at {b} has no matching EOI")));
    }
    let mut mask = vec![false; s * s];
    for i in 0..s {
        match tags[i] {
            Tag::Text | Tag::Boi | Tag::Eoi => {
                for j in 0..=i {
                    mask[i * s + j] = true;
                }
            }
            Tag::Latent => {
                let (b, e) = blocks.iter().copied().find(|&(b, e)| b < i && i < e).unwrap();
                for j in 0..b {
                    mask[i * s + j] = true;
                }
                for j in b + 1..e {
                    mask[i * s + j] = true;
                }
            }
        }
    }
    Ok(Arc::new(mask))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    /// clean conditioning latents (t = 1), compressed space
    CondLatent,
    /// clean conditioning features at encoder width (understanding inputs)
    CondFeat,
    /// noisy latents carrying the flow-matching objective
    Noisy,
}

pub struct LatentBlock<S> {
    pub start: usize,
    pub t: f64,
    pub input: Tensor<S>,
    pub kind: BlockKind,
    pub v_target: Option<Tensor<S>>,
}

pub struct MixedSequence<S> {
    pub tags: Vec<Tag>,
    /// (position, token id) for every text-like slot
    pub tokens: Vec<(usize, usize)>,
    pub blocks: Vec<LatentBlock<S>>,
    /// (logits row, target token): row i is trained to predict the token at
    /// position i + 1
    pub ce: Vec<(usize, usize)>,
}

impl<S> MixedSequence<S> {
    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }
}

/// Unified-model parameters: token embedding, latent/feature input
/// projections, learned positions, per-block timestep embedding, 4-block
/// trunk, and separate text/velocity heads.
pub struct UnifiedModel {
    emb: ParamId,
    lat_in: Linear,
    z_in: Linear,
    pos: ParamId,
    time: TimeEmbed,
    blocks: Vec<TransformerBlock>,
    lnt: LayerNorm,
    thead: Linear,
    lnv: LayerNorm,
    vhead: Linear,
    pub d: usize,
}

impl UnifiedModel {
    /// Registers parameters under "uni.".
    pub fn new<S: Scalar, R: Rng>(store: &mut ParamStore<S>, d: usize, rng: &mut R) -> Self {
        let emb = store.register("uni.emb", Tensor::randn(&[vocab::SIZE, UNI_WIDTH], 0.02, rng));
        let lat_in = Linear::new(store, "uni.lat_in", d, UNI_WIDTH, rng);
        let z_in = Linear::new(store, "uni.z_in", FEAT_DIM, UNI_WIDTH, rng);
        let pos = store.register("uni.pos", Tensor::randn(&[MAX_SEQ, UNI_WIDTH], 0.02, rng));
        let time = TimeEmbed::new(store, "uni.time", UNI_WIDTH, rng);
        let blocks = (0..UNI_BLOCKS)
            .map(|i| TransformerBlock::new(store, &format!("uni.b{i}"), UNI_WIDTH, UNI_HEADS, UNI_HIDDEN, rng))
            .collect();
        let lnt = LayerNorm::new(store, "uni.lnt", UNI_WIDTH);
        let thead = Linear::new(store, "uni.thead", UNI_WIDTH, vocab::SIZE, rng);
        let lnv = LayerNorm::new(store, "uni.lnv", UNI_WIDTH);
        let vhead = Linear::new(store, "uni.vhead", UNI_WIDTH, d, rng);
        UnifiedModel { emb, lat_in, z_in, pos, time, blocks, lnt, thead, lnv, vhead, d }
    }

    /// Builds the [S, width] input rows for a sequence: token embeddings at
    /// text-like slots, projected (and time-stamped) block inputs at latent
    /// slots, plus learned positions when requested.
    fn embed_sequence<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        bind: &mut Binding,
        seq: &MixedSequence<S>,
        use_positions: bool,
    ) -> Result<NodeId> {
        let s_len = seq.len();
        if s_len > MAX_SEQ {
            return Err(NumericsError::InvalidArgument {
                context: "UnifiedModel::forward".into(),
                detail: format!("sequence length {s_len} exceeds cap {MAX_SEQ}"),
            });
        }
        let mut parts: Vec<NodeId> = Vec::new();
        let mut row_of: Vec<usize> = vec![usize::MAX; s_len];
        let mut next_row = 0usize;
        if !seq.tokens.is_empty() {
            let ids: Vec<usize> = seq.tokens.iter().map(|&(_, id)| id).collect();
            let table = bind.node(g, store, self.emb);
            let te = g.embedding(table, Arc::new(ids))?;
            parts.push(te);
            for (k, &(pos, _)) in seq.tokens.iter().enumerate() {
                row_of[pos] = next_row + k;
            }
            next_row += seq.tokens.len();
        }
        for b in &seq.blocks {
            let inp = g.constant(b.input.clone());
            let proj = match b.kind {
                BlockKind::CondFeat => self.z_in.forward(g, store, bind, inp)?,
                _ => self.lat_in.forward(g, store, bind, inp)?,
            };
            let proj = self.time.add_to_all(g, store, bind, proj, b.t)?;
            parts.push(proj);
            let len = b.input.rows();
            for k in 0..len {
                row_of[b.start + k] = next_row + k;
            }
            next_row += len;
        }
        if row_of.iter().any(|&r| r == usize::MAX) {
            return Err(NumericsError::InvalidArgument {
                context: "UnifiedModel::forward".into(),
                detail: "sequence has uncovered positions".into(),
            });
        }
        let all = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };
        let x = g.gather_rows(all, Arc::new(row_of))?;
        if use_positions {
            let pos = bind.node(g, store, self.pos);
            let pos_rows = g.gather_rows(pos, Arc::new((0..s_len).collect()))?;
            g.add(x, pos_rows)
        } else {
            Ok(x)
        }
    }

    /// Forward pass over one mixed sequence. Returns text logits for every
    /// position and, if the sequence has noisy latent slots, velocity
    /// predictions at those slots in slot order.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        bind: &mut Binding,
        seq: &MixedSequence<S>,
        use_positions: bool,
    ) -> Result<ForwardOut> {
        let mask = build_mask(&seq.tags)?;
        let mut h = self.embed_sequence(g, store, bind, seq, use_positions)?;
        for blk in &self.blocks {
            h = blk.forward(g, store, bind, h, Some(&mask))?;
        }
        let ht = self.lnt.forward(g, store, bind, h)?;
        let logits = self.thead.forward(g, store, bind, ht)?;
        let noisy_rows: Vec<usize> = seq
            .blocks
            .iter()
            .filter(|b| b.kind == BlockKind::Noisy)
            .flat_map(|b| b.start..b.start + b.input.rows())
            .collect();
        let velocities = if noisy_rows.is_empty() {
            None
        } else {
            let hv = g.gather_rows(h, Arc::new(noisy_rows))?;
            let hv = self.lnv.forward(g, store, bind, hv)?;
            Some(self.vhead.forward(g, store, bind, hv)?)
        };
        Ok(ForwardOut { hidden: h, logits, velocities })
    }

    /// Runs the trunk over [prompt; m query slots] and returns the hidden
    /// states at the query rows, [m, width]. The prompt keeps its modality
    /// mask and never attends the queries; queries attend the whole prompt
    /// and each other. Query rows carry no learned positions — the query
    /// vectors themselves are learned.
    pub fn forward_with_queries<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        bind: &mut Binding,
        prompt: &MixedSequence<S>,
        queries: NodeId,
        m: usize,
    ) -> Result<NodeId> {
        let l = prompt.len();
        if l + m > MAX_SEQ {
            return Err(NumericsError::InvalidArgument {
                context: "UnifiedModel::forward_with_queries".into(),
                detail: format!("prompt length {l} plus {m} queries exceeds cap {MAX_SEQ}"),
            });
        }
        let mask = prompt_query_mask(&prompt.tags, m)?;
        let xp = self.embed_sequence(g, store, bind, prompt, true)?;
        let mut h = g.concat_rows(&[xp, queries])?;
        for blk in &self.blocks {
            h = blk.forward(g, store, bind, h, Some(&mask))?;
        }
        g.gather_rows(h, Arc::new((l..l + m).collect()))
    }
}

/// Attention mask for a prompt followed by m query slots: prompt rows keep
/// their modality mask and never see the queries; query rows see every
/// prompt position and every query.
pub fn prompt_query_mask(tags: &[Tag], m: usize) -> Result<Arc<Vec<bool>>> {
    let l = tags.len();
    let base = build_mask(tags)?;
    let s = l + m;
    let mut mask = vec![false; s * s];
    for i in 0..l {
        mask[i * s..i * s + l].copy_from_slice(&base[i * l..(i + 1) * l]);
    }
    for i in l..s {
        for j in 0..s {
            mask[i * s + j] = true;
        }
    }
    Ok(Arc::new(mask))
}

pub struct ForwardOut {
    pub hidden: NodeId,
    pub logits: NodeId,
    pub velocities: Option<NodeId>,
}

pub struct JointLoss {
    pub total: NodeId,
    pub l_ce: Option<NodeId>,
    pub l_fm: Option<NodeId>,
}

/// total = w_fm * L_fm + w_ce * L_ce; either term vanishes (and is flagged
/// as absent) when the sequence carries no slots of that kind.
pub fn joint_loss<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    bind: &mut Binding,
    model: &UnifiedModel,
    seq: &MixedSequence<S>,
    w_fm: f64,
    w_ce: f64,
) -> Result<JointLoss> {
    let out = model.forward(g, store, bind, seq, true)?;
    let l_ce = if seq.ce.is_empty() {
        None
    } else {
        let rows: Vec<usize> = seq.ce.iter().map(|&(r, _)| r).collect();
        let targets: Vec<usize> = seq.ce.iter().map(|&(_, t)| t).collect();
        let lr = g.gather_rows(out.logits, Arc::new(rows))?;
        let w = Arc::new(vec![S::one(); targets.len()]);
        Some(g.ce_logits(lr, Arc::new(targets), w)?)
    };
    let l_fm = match out.velocities {
        Some(v) => {
            let mut rows: Vec<S> = Vec::new();
            let mut count = 0usize;
            for b in seq.blocks.iter().filter(|b| b.kind == BlockKind::Noisy) {
                let tgt = b.v_target.as_ref().ok_or_else(|| NumericsError::InvalidArgument {
                    context: "joint_loss".into(),
                    detail: "noisy block lacks a velocity target".into(),
                })?;
                rows.extend_from_slice(tgt.data());
                count += tgt.rows();
            }
            let tgt = Tensor::from_vec(&[count, model.d], rows)?;
            let tn = g.constant(tgt);
            Some(g.mse(v, tn)?)
        }
        None => None,
    };
    let total = match (l_ce, l_fm) {
        (Some(c), Some(f)) => {
            let fs = g.scale(f, S::from_f64_c(w_fm))?;
            let cs = g.scale(c, S::from_f64_c(w_ce))?;
            g.add(fs, cs)?
        }
        (Some(c), None) => g.scale(c, S::from_f64_c(w_ce))?,
        (None, Some(f)) => g.scale(f, S::from_f64_c(w_fm))?,
        (None, None) => {
            return Err(NumericsError::InvalidArgument {
                context: "joint_loss".into(),
                detail: "sequence has neither text targets nor latent slots".into(),
            })
        }
    };
    Ok(JointLoss { total, l_ce, l_fm })
}

// ---------------------------------------------------------------------------
// sequence builders
// ---------------------------------------------------------------------------

/// Plain language modeling: every token after the first is a CE target.
pub fn seq_text_only<S: Scalar>(caption: &[usize]) -> MixedSequence<S> {
    let tags = vec![Tag::Text; caption.len()];
    let tokens: Vec<(usize, usize)> = caption.iter().copied().enumerate().collect();
    let ce = (0..caption.len().saturating_sub(1)).map(|i| (i, caption[i + 1])).collect();
    MixedSequence { tags, tokens, blocks: vec![], ce }
}

/// Generation: [caption..., BOI, z_t * n, EOI] with CE over the caption and
/// the BOI transition, flow matching over the latent slots.
pub fn seq_t2i<S: Scalar>(
    caption: &[usize],
    z1_std: &Tensor<S>,
    eps: &Tensor<S>,
    t: f64,
) -> Result<MixedSequence<S>> {
    let z_t = interpolate(z1_std, eps, t)?;
    let v = target_velocity(z1_std, eps)?;
    Ok(seq_t2i_from_state(caption, z_t, t, Some(v)))
}

/// Sampling-time layout: the latent block is the integrator state.
pub fn seq_t2i_from_state<S: Scalar>(
    caption: &[usize],
    z_t: Tensor<S>,
    t: f64,
    v_target: Option<Tensor<S>>,
) -> MixedSequence<S> {
    let l = caption.len();
    let n = z_t.rows();
    let mut tags = vec![Tag::Text; l];
    tags.push(Tag::Boi);
    tags.extend(std::iter::repeat(Tag::Latent).take(n));
    tags.push(Tag::Eoi);
    let mut tokens: Vec<(usize, usize)> = caption.iter().copied().enumerate().collect();
    tokens.push((l, vocab::BOI));
    tokens.push((l + 1 + n, vocab::EOI));
    let mut ce: Vec<(usize, usize)> = (0..l.saturating_sub(1)).map(|i| (i, caption[i + 1])).collect();
    if l > 0 {
        ce.push((l - 1, vocab::BOI));
    }
    let block = LatentBlock { start: l + 1, t, input: z_t, kind: BlockKind::Noisy, v_target };
    MixedSequence { tags, tokens, blocks: vec![block], ce }
}

/// Understanding: [BOI, Z * 64, EOI, caption...] with CE over the caption
/// only (the image block conditions, it is never a text target).
pub fn seq_i2t<S: Scalar>(caption: &[usize], feats: &Tensor<S>) -> MixedSequence<S> {
    let n = feats.rows();
    let l = caption.len();
    let mut tags = vec![Tag::Boi];
    tags.extend(std::iter::repeat(Tag::Latent).take(n));
    tags.push(Tag::Eoi);
    tags.extend(std::iter::repeat(Tag::Text).take(l));
    let mut tokens: Vec<(usize, usize)> = vec![(0, vocab::BOI), (n + 1, vocab::EOI)];
    for (k, &id) in caption.iter().enumerate() {
        tokens.push((n + 2 + k, id));
    }
    let mut ce = Vec::with_capacity(l);
    if l > 0 {
        ce.push((n + 1, caption[0]));
        for k in 0..l - 1 {
            ce.push((n + 2 + k, caption[k + 1]));
        }
    }
    let block =
        LatentBlock { start: 1, t: 1.0, input: feats.clone(), kind: BlockKind::CondFeat, v_target: None };
    MixedSequence { tags, tokens, blocks: vec![block], ce }
}

/// Editing: [BOI, clean source latents, EOI, instruction..., BOI, noisy
/// target latents, EOI]. The clean source context occupies n + 2 slots.
pub fn seq_edit<S: Scalar>(
    src_lat_std: &Tensor<S>,
    instr: &[usize],
    tgt_state: Tensor<S>,
    t: f64,
    v_target: Option<Tensor<S>>,
) -> MixedSequence<S> {
    let n = src_lat_std.rows();
    let m = tgt_state.rows();
    let l = instr.len();
    let mut tags = vec![Tag::Boi];
    tags.extend(std::iter::repeat(Tag::Latent).take(n));
    tags.push(Tag::Eoi);
    tags.extend(std::iter::repeat(Tag::Text).take(l));
    tags.push(Tag::Boi);
    tags.extend(std::iter::repeat(Tag::Latent).take(m));
    tags.push(Tag::Eoi);
    let boi2 = n + 2 + l;
    let mut tokens: Vec<(usize, usize)> = vec![(0, vocab::BOI), (n + 1, vocab::EOI)];
    for (k, &id) in instr.iter().enumerate() {
        tokens.push((n + 2 + k, id));
    }
    tokens.push((boi2, vocab::BOI));
    tokens.push((boi2 + 1 + m, vocab::EOI));
    let mut ce = Vec::new();
    if l > 0 {
        ce.push((n + 1, instr[0]));
        for k in 0..l - 1 {
            ce.push((n + 2 + k, instr[k + 1]));
        }
        ce.push((n + 1 + l, vocab::BOI));
    }
    let src = LatentBlock {
        start: 1,
        t: 1.0,
        input: src_lat_std.clone(),
        kind: BlockKind::CondLatent,
        v_target: None,
    };
    let tgt = LatentBlock { start: boi2 + 1, t, input: tgt_state, kind: BlockKind::Noisy, v_target };
    MixedSequence { tags, tokens, blocks: vec![src, tgt], ce }
}

/// The null caption used for condition dropout and the unconditional
/// guidance branch.
pub fn null_caption() -> Vec<usize> {
    vec![vocab::BOS, vocab::EOS]
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TaskMix {
    pub text: f64,
    pub t2i: f64,
    pub i2t: f64,
    pub edit: f64,
}

impl Default for TaskMix {
    fn default() -> Self {
        TaskMix { text: 0.15, t2i: 0.55, i2t: 0.15, edit: 0.15 }
    }
}

impl TaskMix {
    pub fn text_only() -> Self {
        TaskMix { text: 1.0, t2i: 0.0, i2t: 0.0, edit: 0.0 }
    }

    /// Language modeling plus captioning: the "vision-language" pretraining
    /// mixture used by the init ablation.
    pub fn text_and_i2t() -> Self {
        TaskMix { text: 0.5, t2i: 0.0, i2t: 0.5, edit: 0.0 }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> Task {
        let total = self.text + self.t2i + self.i2t + self.edit;
        assert!(total > 0.0, "task mixture has zero mass");
        let x: f64 = rng.gen::<f64>() * total;
        if x < self.text {
            Task::Text
        } else if x < self.text + self.t2i {
            Task::T2i
        } else if x < self.text + self.t2i + self.i2t {
            Task::I2t
        } else {
            Task::Edit
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Task {
    Text,
    T2i,
    I2t,
    Edit,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UnifiedConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    pub mix: TaskMix,
    pub cond_dropout: f64,
    pub w_fm: f64,
    pub w_ce: f64,
    pub eval_every: usize,
    /// stop as soon as the held-out flow loss reaches this value
    pub tau: Option<f64>,
}

impl Default for UnifiedConfig {
    fn default() -> Self {
        UnifiedConfig {
            steps: 1200,
            batch: 4,
            lr: 3e-4,
            warmup: 100,
            weight_decay: 0.01,
            mix: TaskMix::default(),
            cond_dropout: 0.1,
            w_fm: 5.0,
            w_ce: 1.0,
            eval_every: 25,
            tau: None,
        }
    }
}

/// Frozen-stage-1 products the unified trainer consumes: standardized
/// latents, raw encoder features, edit triples, and a fixed evaluation set.
pub struct UnifiedData {
    pub n: usize,
    pub d: usize,
    pub captions: Vec<Vec<usize>>,
    pub latents: Vec<Tensor<f32>>,
    pub feats: Vec<Tensor<f32>>,
    pub edits: Vec<(Tensor<f32>, Vec<usize>, Tensor<f32>)>,
    /// fixed (caption, z1_std, eps, t) tuples for the eval flow-loss curve
    pub eval: Vec<(Vec<usize>, Tensor<f32>, Tensor<f32>, f64)>,
}

/// Runs the frozen stage-1 stack over the corpus once and caches everything
/// stage 2 needs. Latents are standardized with the stage-1 statistics.
pub fn prepare_unified_data(
    stage1: &Stage1Run,
    train: &[(Scene, Vec<usize>)],
    val: &[(Scene, Vec<usize>)],
    edit_count: usize,
    eval_size: usize,
    seed: u64,
) -> Result<UnifiedData> {
    let latent_of = |scene: &Scene| -> Result<Tensor<f32>> {
        let img = render::<f32>(scene);
        let feats = stage1.model.enc.encode(&stage1.store, &img)?;
        let lat = stage1.model.comp.compress_value(&stage1.store, &feats)?;
        Ok(stage1.norm.standardize(&lat))
    };
    let mut captions = Vec::with_capacity(train.len());
    let mut latents = Vec::with_capacity(train.len());
    let mut feats = Vec::with_capacity(train.len());
    for (scene, caption) in train {
        let img = render::<f32>(scene);
        let f = stage1.model.enc.encode(&stage1.store, &img)?;
        let lat = stage1.model.comp.compress_value(&stage1.store, &f)?;
        latents.push(stage1.norm.standardize(&lat));
        feats.push(f);
        captions.push(caption.clone());
    }
    let mut edits = Vec::with_capacity(edit_count);
    for pair in make_edit_pairs(seed ^ 0x6564_6974, edit_count) {
        let src = latent_of(&pair.source)?;
        let tgt = latent_of(&pair.target)?;
        edits.push((src, pair.instruction, tgt));
    }
    let n = latents.first().map(|l| l.rows()).unwrap_or(0);
    let d = latents.first().map(|l| l.cols()).unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6576_616c);
    let mut eval = Vec::with_capacity(eval_size);
    for i in 0..eval_size {
        let (scene, caption) = &val[i % val.len()];
        let lat = latent_of(scene)?;
        let eps = Tensor::<f32>::randn(&[n, d], 1.0, &mut rng);
        let t = (i as f64 + 0.5) / eval_size as f64;
        eval.push((caption.clone(), lat, eps, t));
    }
    Ok(UnifiedData { n, d, captions, latents, feats, edits, eval })
}

pub struct UnifiedRun {
    pub store: ParamStore<f32>,
    pub model: UnifiedModel,
    pub records: Vec<TrainRecord>,
    /// (step, held-out flow loss) at each evaluation
    pub eval_curve: Vec<(usize, f64)>,
    pub steps_to_tau: Option<usize>,
    pub steps_run: usize,
    pub diverged_at: Option<usize>,
}

/// Held-out flow loss on the fixed eval tuples (forward passes only).
pub fn eval_flow_loss(model: &UnifiedModel, store: &ParamStore<f32>, data: &UnifiedData) -> Result<f64> {
    let mut sum = 0.0;
    for (caption, z1, eps, t) in &data.eval {
        let seq = seq_t2i(caption, z1, eps, *t)?;
        let mut g: Graph<f32> = Graph::new();
        let mut bind = Binding::new(store);
        let loss = joint_loss(&mut g, store, &mut bind, model, &seq, 1.0, 0.0)?;
        let fm = loss.l_fm.expect("t2i eval sequence always has latent slots");
        sum += g.scalar_value(fm) as f64;
    }
    Ok(sum / data.eval.len() as f64)
}

/// Stage-2 training of the unified pathway on a frozen stage-1 stack.
/// `init` warm-starts all parameters from a pretrained store with the same
/// layout (used by the LM/VLM initialization comparison).
pub fn train_unified(
    data: &UnifiedData,
    cfg: &UnifiedConfig,
    seed: u64,
    init: Option<&ParamStore<f32>>,
) -> Result<UnifiedRun> {
    if data.captions.is_empty() {
        return Err(NumericsError::InvalidArgument {
            context: "train_unified".into(),
            detail: "empty training corpus".into(),
        });
    }
    let mut store: ParamStore<f32> = ParamStore::new();
    let mut rng_init = ChaCha8Rng::seed_from_u64(seed);
    let model = UnifiedModel::new(&mut store, data.d, &mut rng_init);
    if let Some(src) = init {
        // Warm start: copy every parameter whose name and shape both match.
        // Shape mismatches (e.g. the latent adapters when the donor trunk was
        // built for a different latent width) keep their fresh init, so a
        // text-pretrained trunk can seed models for any latent dimension.
        let mut copied = 0usize;
        for id in src.ids().collect::<Vec<_>>() {
            let name = src.name(id).to_string();
            if let Some(dst) = store.find(&name) {
                if store.get(dst).shape() == src.get(id).shape() {
                    store.set(dst, src.get(id).clone());
                    copied += 1;
                }
            }
        }
        if copied == 0 {
            return Err(NumericsError::InvalidArgument {
                context: "train_unified".into(),
                detail: "init store shares no parameter (name, shape) with this model".into(),
            });
        }
    }
    let mut opt = AdamW::new(
        AdamWConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..AdamWConfig::default() },
        &store,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x756e_6966);
    let mut records = Vec::new();
    let mut eval_curve = Vec::new();
    let mut steps_to_tau = None;
    let mut diverged_at = None;
    let mut steps_run = 0usize;
    let mut snapshot: Vec<(ParamId, Tensor<f32>)> =
        store.ids().map(|id| (id, store.get(id).clone())).collect();

    'train: for step in 0..cfg.steps {
        let mut accum = GradAccum::new(&store);
        let mut ce_sum = 0.0f64;
        let mut ce_n = 0usize;
        let mut fm_sum = 0.0f64;
        let mut fm_n = 0usize;
        for _ in 0..cfg.batch {
            let mut task = cfg.mix.sample(&mut rng);
            if task == Task::Edit && data.edits.is_empty() {
                task = Task::T2i;
            }
            let seq: MixedSequence<f32> = match task {
                Task::Text => {
                    let i = rng.gen_range(0..data.captions.len());
                    seq_text_only(&data.captions[i])
                }
                Task::T2i => {
                    let i = rng.gen_range(0..data.captions.len());
                    let t: f64 = rng.gen();
                    let eps = Tensor::<f32>::randn(&[data.n, data.d], 1.0, &mut rng);
                    let drop: f64 = rng.gen();
                    let caption: Vec<usize> = if drop < cfg.cond_dropout {
                        null_caption()
                    } else {
                        data.captions[i].clone()
                    };
                    seq_t2i(&caption, &data.latents[i], &eps, t)?
                }
                Task::I2t => {
                    let i = rng.gen_range(0..data.captions.len());
                    seq_i2t(&data.captions[i], &data.feats[i])
                }
                Task::Edit => {
                    let i = rng.gen_range(0..data.edits.len());
                    let (src, instr, tgt) = &data.edits[i];
                    let t: f64 = rng.gen();
                    let eps = Tensor::<f32>::randn(&[tgt.rows(), data.d], 1.0, &mut rng);
                    let state = interpolate(tgt, &eps, t)?;
                    let v = target_velocity(tgt, &eps)?;
                    seq_edit(src, instr, state, t, Some(v))
                }
            };
            let mut g: Graph<f32> = Graph::new();
            let mut bind = Binding::new(&store);
            let loss = match joint_loss(&mut g, &store, &mut bind, &model, &seq, cfg.w_fm, cfg.w_ce) {
                Ok(l) => l,
                Err(NumericsError::NonFinite { .. }) => {
                    diverged_at = Some(step);
                    break 'train;
                }
                Err(e) => return Err(e),
            };
            let total = g.scalar_value(loss.total) as f64;
            if !total.is_finite() || total > 1e3 {
                diverged_at = Some(step);
                break 'train;
            }
            if let Some(c) = loss.l_ce {
                ce_sum += g.scalar_value(c) as f64;
                ce_n += 1;
            }
            if let Some(f) = loss.l_fm {
                fm_sum += g.scalar_value(f) as f64;
                fm_n += 1;
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

        if (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps {
            let fm = eval_flow_loss(&model, &store, data)?;
            eval_curve.push((step + 1, fm));
            let mut rec = TrainRecord::at(step + 1);
            rec.l_fm_eval = Some(fm);
            if ce_n > 0 {
                rec.l_ce = Some(ce_sum / ce_n as f64);
            }
            if fm_n > 0 {
                rec.l_flow = Some(fm_sum / fm_n as f64);
            }
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

    Ok(UnifiedRun { store, model, records, eval_curve, steps_to_tau, steps_run, diverged_at })
}

// ---------------------------------------------------------------------------
// sampling
// ---------------------------------------------------------------------------

fn predict_t2i_velocity(
    model: &UnifiedModel,
    store: &ParamStore<f32>,
    caption: &[usize],
    z: &Tensor<f32>,
    t: f64,
) -> Result<Tensor<f32>> {
    let seq = seq_t2i_from_state(caption, z.clone(), t, None);
    let mut g: Graph<f32> = Graph::new();
    let mut bind = Binding::new(store);
    let out = model.forward(&mut g, store, &mut bind, &seq, true)?;
    let v = out.velocities.expect("t2i sequence has latent slots");
    Ok(g.value(v).clone())
}

fn predict_edit_velocity(
    model: &UnifiedModel,
    store: &ParamStore<f32>,
    src_lat_std: &Tensor<f32>,
    instr: &[usize],
    z: &Tensor<f32>,
    t: f64,
) -> Result<Tensor<f32>> {
    let seq = seq_edit(src_lat_std, instr, z.clone(), t, None);
    let mut g: Graph<f32> = Graph::new();
    let mut bind = Binding::new(store);
    let out = model.forward(&mut g, store, &mut bind, &seq, true)?;
    let v = out.velocities.expect("edit sequence has latent slots");
    Ok(g.value(v).clone())
}

/// Samples a standardized latent from the caption by integrating the
/// velocity head over the latent slots, with optional classifier-free
/// guidance against the null caption.
pub fn generate_latent(
    model: &UnifiedModel,
    store: &ParamStore<f32>,
    caption: &[usize],
    n: usize,
    sampler: &SamplerConfig,
) -> Result<Tensor<f32>> {
    sampler.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed ^ 0x756e_6921);
    let z0 = Tensor::<f32>::randn(&[n, model.d], 1.0, &mut rng);
    let uncond = null_caption();
    let guided = (sampler.guidance - 1.0).abs() > 1e-12;
    let mut v_fn = |z: &Tensor<f32>, t: f64| -> Result<Tensor<f32>> {
        let v_c = predict_t2i_velocity(model, store, caption, z, t)?;
        if !guided {
            return Ok(v_c);
        }
        let v_u = predict_t2i_velocity(model, store, &uncond, z, t)?;
        guide(&v_u, &v_c, sampler.guidance)
    };
    euler_integrate(&mut v_fn, &z0, sampler.steps)
}

/// Latent-space editing: integrate the velocity field conditioned on the
/// clean source latents and the instruction.
pub fn edit_latent(
    model: &UnifiedModel,
    store: &ParamStore<f32>,
    src_lat_std: &Tensor<f32>,
    instr: &[usize],
    n: usize,
    sampler: &SamplerConfig,
) -> Result<Tensor<f32>> {
    sampler.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed ^ 0x6564_6921);
    let z0 = Tensor::<f32>::randn(&[n, model.d], 1.0, &mut rng);
    let mut v_fn = |z: &Tensor<f32>, t: f64| -> Result<Tensor<f32>> {
        predict_edit_velocity(model, store, src_lat_std, instr, z, t)
    };
    euler_integrate(&mut v_fn, &z0, sampler.steps)
}

/// Full text-to-image: sample a latent, destandardize, decompress, decode.
pub fn generate_image(
    stage1: &Stage1Run,
    uni_model: &UnifiedModel,
    uni_store: &ParamStore<f32>,
    caption: &[usize],
    sampler: &SamplerConfig,
) -> Result<Tensor<f32>> {
    let n = stage1.model.comp.cfg.tokens_out();
    let lat_std = generate_latent(uni_model, uni_store, caption, n, sampler)?;
    let lat = stage1.norm.destandardize(&lat_std);
    let cond = condition_from_latent(&stage1.model, &stage1.store, &lat)?;
    decode_from_condition(&stage1.model, &stage1.store, &cond, sampler.steps, sampler.seed)
}

/// Full image editing: encode and compress the source image, sample the
/// edited latent, decode.
pub fn edit_image(
    stage1: &Stage1Run,
    uni_model: &UnifiedModel,
    uni_store: &ParamStore<f32>,
    src_image: &Tensor<f32>,
    instr: &[usize],
    sampler: &SamplerConfig,
) -> Result<Tensor<f32>> {
    let feats = stage1.model.enc.encode(&stage1.store, src_image)?;
    let lat = stage1.model.comp.compress_value(&stage1.store, &feats)?;
    let lat_std = stage1.norm.standardize(&lat);
    let n = lat_std.rows();
    let out_std = edit_latent(uni_model, uni_store, &lat_std, instr, n, sampler)?;
    let out = stage1.norm.destandardize(&out_std);
    let cond = condition_from_latent(&stage1.model, &stage1.store, &out)?;
    decode_from_condition(&stage1.model, &stage1.store, &cond, sampler.steps, sampler.seed)
}
