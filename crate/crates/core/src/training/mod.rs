//! The four-stage supervised curriculum.
//!
//! 1. joint encoder/decoder pre-training (autoregressive + masked LM),
//! 2. the same objective on templated interactions,
//! 3. self-supervised pre-training of the memory write network,
//! 4. end-to-end training over unrolled multi-turn dialogues.

pub mod curriculum;
mod optim;

pub use optim::{Adam, AdamConfig, GradAccum};

use serde::{Deserialize, Serialize};

use crate::abms::{MemorySource, ShortTermMemory};
use crate::bench::data::Dialogue;
use crate::error::{Error, Result};
use crate::model::tokenizer::{self, ANSWER, MASK, PAD};
use crate::model::{Baseline, Component, Rxt};
use crate::numcore::{Graph, Rng, Tensor, Var};

/// Replaces each non-special token by `[MASK]` with probability
/// `mask_prob`. If nothing was drawn, one eligible position is masked.
/// Returns the masked sequence and the masked positions in order.
pub fn mask_tokens(seq: &[usize], mask_prob: f64, rng: &mut Rng) -> Result<(Vec<usize>, Vec<usize>)> {
    let eligible: Vec<usize> = (0..seq.len()).filter(|&i| !tokenizer::is_special(seq[i])).collect();
    if eligible.is_empty() {
        return Err(Error::Data("nothing to mask: every token is special".into()));
    }
    let mut positions: Vec<usize> = eligible.iter().copied().filter(|_| rng.uniform() < mask_prob).collect();
    if positions.is_empty() {
        positions.push(eligible[rng.below(eligible.len())]);
    }
    let mut masked = seq.to_vec();
    for &p in &positions {
        masked[p] = MASK;
    }
    Ok((masked, positions))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JointTrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub mask_prob: f64,
    /// σ of the Gaussian added to the detached encoder states.
    pub noise_std: f64,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
}

impl Default for JointTrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            mask_prob: 0.15,
            noise_std: 0.02,
            lr: 2e-3,
            steps: 300,
            batch_size: 8,
        }
    }
}

impl JointTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha + self.beta > 0.0) {
            return Err(Error::Config("joint loss weights must be non-negative with a positive sum".into()));
        }
        if !(self.mask_prob > 0.0 && self.mask_prob < 1.0) {
            return Err(Error::Config("mask_prob must lie in (0, 1)".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be non-negative".into()));
        }
        Ok(())
    }
}

/// Graph nodes of one joint-objective evaluation.
pub struct JointTerms {
    /// What is differentiated: `joint + α·aux_weight·aux`.
    pub objective: Var,
    /// `α·L_AR + β·L_MLM`.
    pub joint: Var,
    pub ar: Var,
    pub mlm: Var,
    pub aux: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct JointLosses {
    pub joint: f64,
    pub ar: f64,
    pub mlm: f64,
    pub aux: f64,
}

/// Adds `N(0, std)` noise to a detached copy of each encoder layer.
fn noisy_detached(g: &mut Graph, layers: &[Var], std: f64, rng: &mut Rng) -> Result<Vec<Var>> {
    layers
        .iter()
        .map(|&v| {
            let d = g.detach(v);
            if std > 0.0 {
                let noise = Tensor::randn(g.shape(d), std, rng);
                let n = g.constant(noise);
                g.add(d, n)
            } else {
                Ok(d)
            }
        })
        .collect()
}

/// Encoder reads the masked sequence (masked-LM loss); the decoder reads the
/// original sequence teacher-forced, with the detached, noised encoder
/// states as its memory keys/values (autoregressive loss).
pub fn joint_loss(g: &mut Graph, model: &Rxt, seq: &[usize], cfg: &JointTrainConfig, rng: &mut Rng) -> Result<JointTerms> {
    if seq.len() < 2 {
        return Err(Error::Data("sequences need at least two tokens".into()));
    }
    if model.encoder.is_empty() {
        return Err(Error::Config("joint training needs at least one layer".into()));
    }
    let (masked, positions) = mask_tokens(seq, cfg.mask_prob, rng)?;
    let enc = model.encode(g, &masked)?;
    let last = *enc.last().expect("non-empty encoder");
    let mlm_logits = model.mlm_logits(g, last)?;
    let mut mlm_targets = vec![PAD; seq.len()];
    for p in positions {
        mlm_targets[p] = seq[p];
    }
    let mlm = g.cross_entropy(mlm_logits, &mlm_targets, PAD)?;

    let ed = noisy_detached(g, &enc, cfg.noise_std, rng)?;
    let src: Vec<MemorySource> = ed.iter().map(|&v| MemorySource::Slots(v)).collect();
    let n = seq.len();
    let out = model.decode(g, &seq[..n - 1], 0, &src, None)?;
    let ar = g.cross_entropy(out.logits, &seq[1..], PAD)?;

    let wa = g.scale(ar, cfg.alpha)?;
    let wb = g.scale(mlm, cfg.beta)?;
    let joint = g.add(wa, wb)?;
    let waux = g.scale(out.aux, cfg.alpha * model.config.moe_aux_weight)?;
    let objective = g.add(joint, waux)?;
    Ok(JointTerms {
        objective,
        joint,
        ar,
        mlm,
        aux: out.aux,
    })
}

fn joint_batch_step(
    model: &mut Rxt,
    opt: &mut Adam,
    batch: &[Vec<usize>],
    cfg: &JointTrainConfig,
    lr: f64,
    rng: &mut Rng,
) -> Result<JointLosses> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let inv = 1.0 / batch.len() as f64;
    let mut acc = GradAccum::default();
    let mut out = JointLosses::default();
    for seq in batch {
        let mut g = Graph::new(&model.params);
        let t = joint_loss(&mut g, model, seq, cfg, rng)?;
        let grads = g.backward(t.objective)?;
        acc.add(g.param_grads(&grads), inv);
        out.joint += inv * g.value(t.joint).item();
        out.ar += inv * g.value(t.ar).item();
        out.mlm += inv * g.value(t.mlm).item();
        out.aux += inv * g.value(t.aux).item();
    }
    opt.step(&mut model.params, &acc.into_vec(), lr)?;
    Ok(out)
}

/// One optimiser step of joint pre-training over plain token sequences.
pub fn stage1_joint_step(model: &mut Rxt, opt: &mut Adam, batch: &[Vec<usize>], cfg: &JointTrainConfig, lr: f64, rng: &mut Rng) -> Result<JointLosses> {
    joint_batch_step(model, opt, batch, cfg, lr, rng)
}

/// Joint step over `[Query] X [Answer] Y [EOS]` sequences, optionally
/// right-padded with `[PAD]`, which never contributes to a loss.
pub fn stage2_sft_step(model: &mut Rxt, opt: &mut Adam, batch: &[Vec<usize>], cfg: &JointTrainConfig, lr: f64, rng: &mut Rng) -> Result<JointLosses> {
    for seq in batch {
        tokenizer::split_interaction(seq)?;
    }
    let trimmed: Vec<Vec<usize>> = batch
        .iter()
        .map(|s| {
            let end = s.iter().rposition(|&t| t != PAD).map_or(0, |e| e + 1);
            s[..end].to_vec()
        })
        .collect();
    joint_batch_step(model, opt, &trimmed, cfg, lr, rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WSchedule {
    Linear,
    Exponential,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemAttnPretrainConfig {
    pub w_start: f64,
    pub w_end: f64,
    pub n_curriculum_steps: usize,
    pub schedule: WSchedule,
    /// σ of noise on the starting memory of each training dialogue.
    pub stm_noise_std: f64,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
}

impl Default for MemAttnPretrainConfig {
    fn default() -> Self {
        Self {
            w_start: 0.9,
            w_end: 0.5,
            n_curriculum_steps: 3,
            schedule: WSchedule::Linear,
            stm_noise_std: 0.02,
            lr: 3e-3,
            steps: 600,
            batch_size: 8,
        }
    }
}

impl MemAttnPretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.w_end && self.w_end <= self.w_start && self.w_start <= 1.0) {
            return Err(Error::Config("need 0 < w_end <= w_start <= 1".into()));
        }
        if self.n_curriculum_steps == 0 {
            return Err(Error::Config("n_curriculum_steps must be positive".into()));
        }
        Ok(())
    }
}

/// New-data weight for interaction `t` (1-based): `w_start` at `t = 1`,
/// `w_end` from `t = n` on, linear or geometric in between.
pub fn w_schedule(t: usize, cfg: &MemAttnPretrainConfig) -> Result<f64> {
    cfg.validate()?;
    if t == 0 {
        return Err(Error::invalid("w_schedule", "interactions are counted from 1"));
    }
    let n = cfg.n_curriculum_steps;
    if t == 1 {
        return Ok(cfg.w_start);
    }
    if t >= n {
        return Ok(cfg.w_end);
    }
    let frac = (t - 1) as f64 / (n - 1) as f64;
    Ok(match cfg.schedule {
        WSchedule::Linear => cfg.w_start + (cfg.w_end - cfg.w_start) * frac,
        WSchedule::Exponential => cfg.w_start * (cfg.w_end / cfg.w_start).powf(frac),
    })
}

/// Mean-pools the `T` rows of `ed` into `slots` contiguous buckets of
/// `ceil(T/slots)` rows. Buckets past the end of the data are zero.
pub fn pool_to_slots(ed: &Tensor, slots: usize) -> Tensor {
    let (t, d) = (ed.rows(), ed.cols());
    let size = t.div_ceil(slots).max(1);
    let mut out = Tensor::zeros(&[slots, d]);
    for s in 0..slots {
        let (lo, hi) = (s * size, ((s + 1) * size).min(t));
        if lo >= hi {
            continue;
        }
        let row = out.row_mut(s);
        for r in lo..hi {
            for (o, v) in row.iter_mut().zip(ed.row(r)) {
                *o += v;
            }
        }
        let inv = 1.0 / (hi - lo) as f64;
        row.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

/// `(1 − w)·prev + w·pool(ed)`.
pub fn memattn_target(prev: &Tensor, ed: &Tensor, w: f64) -> Result<Tensor> {
    let pooled = pool_to_slots(ed, prev.rows());
    if pooled.shape() != prev.shape() {
        return Err(Error::shape("memattn_target", prev.shape(), pooled.shape()));
    }
    let data = prev.data().iter().zip(pooled.data()).map(|(p, e)| (1.0 - w) * p + w * e).collect();
    Tensor::new(prev.shape().to_vec(), data)
}

/// `−mean_l cos_rows(MemAttn(prev, ed)_l, target_l)` and the new state.
pub fn mem_loss(g: &mut Graph, model: &Rxt, prev: &[Var], ed: &[Var], targets: &[Var]) -> Result<(Var, Vec<Var>)> {
    let next = model.memory.update(g, prev, ed)?;
    let cos = next
        .iter()
        .zip(targets)
        .map(|(&n, &t)| g.cosine_rows(n, t, true))
        .collect::<Result<Vec<_>>>()?;
    let total = g.add_n(&cos)?;
    let loss = g.scale(total, -1.0 / cos.len() as f64)?;
    Ok((loss, next))
}

/// Gradient contribution and new state for one memory pre-training
/// interaction. Only memory-attention parameters are tracked.
fn stage3_grads(model: &Rxt, stm_prev: &ShortTermMemory, interaction: &[usize], w: f64) -> Result<(f64, Vec<(crate::numcore::ParamId, Tensor)>, ShortTermMemory)> {
    let ed = model.encode_data(interaction)?;
    let targets = stm_prev
        .layers()
        .iter()
        .zip(&ed.layers)
        .map(|(p, e)| memattn_target(p, e, w))
        .collect::<Result<Vec<_>>>()?;
    let mask = model.trainable_mask(&[Component::MemoryAttention]);
    let mut g = Graph::new(&model.params).with_trainable(&mask);
    let prev = stm_prev.bind(&mut g);
    let edv = ed.bind(&mut g);
    let tv: Vec<Var> = targets.into_iter().map(|t| g.constant(t)).collect();
    let (loss, next) = mem_loss(&mut g, model, &prev, &edv, &tv)?;
    let grads = g.backward(loss)?;
    let pg = g.param_grads(&grads);
    let slots = next.iter().map(|&v| g.value(v).clone()).collect();
    Ok((g.value(loss).item(), pg, stm_prev.successor(slots)?))
}

/// One optimiser step on a single `(STM_{t−1}, interaction)` pair; returns
/// `L_Mem` and `STM_t`.
pub fn stage3_memattn_step(
    model: &mut Rxt,
    opt: &mut Adam,
    stm_prev: &ShortTermMemory,
    interaction: &[usize],
    w: f64,
    lr: f64,
) -> Result<(f64, ShortTermMemory)> {
    let (loss, grads, next) = stage3_grads(model, stm_prev, interaction, w)?;
    opt.step(&mut model.params, &grads, lr)?;
    Ok((loss, next))
}

fn noisy_state(stm: &ShortTermMemory, std: f64, rng: &mut Rng) -> Result<ShortTermMemory> {
    if std == 0.0 {
        return Ok(stm.clone());
    }
    let layers = stm
        .layers()
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.data_mut().iter_mut().for_each(|v| *v += std * rng.normal());
            t
        })
        .collect();
    ShortTermMemory::new(layers)
}

/// Memory pre-training over whole dialogues: each interaction is one
/// self-supervised step target, gradients averaged over the batch.
pub fn stage3_batch_step(
    model: &mut Rxt,
    opt: &mut Adam,
    batch: &[Dialogue],
    cfg: &MemAttnPretrainConfig,
    lr: f64,
    rng: &mut Rng,
) -> Result<f64> {
    cfg.validate()?;
    let n: usize = batch.iter().map(|d| d.turns.len()).sum();
    if n == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    let inv = 1.0 / n as f64;
    let mut acc = GradAccum::default();
    let mut total = 0.0;
    for d in batch {
        let mut stm = noisy_state(&model.initial_stm()?, cfg.stm_noise_std, rng)?;
        for (t, turn) in d.turns.iter().enumerate() {
            let w = w_schedule(t + 1, cfg)?;
            let (loss, grads, next) = stage3_grads(model, &stm, &turn.tokens()?, w)?;
            acc.add(grads, inv);
            total += inv * loss;
            stm = next;
        }
    }
    opt.step(&mut model.params, &acc.into_vec(), lr)?;
    Ok(total)
}

/// Mean `cos(STM_t, STM_target)` over every interaction of `dialogues`,
/// starting each from the learned initial state.
pub fn memattn_cosine(model: &Rxt, dialogues: &[Dialogue], cfg: &MemAttnPretrainConfig) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for d in dialogues {
        let mut stm = model.initial_stm()?;
        for (t, turn) in d.turns.iter().enumerate() {
            let w = w_schedule(t + 1, cfg)?;
            let toks = turn.tokens()?;
            let ed = model.encode_data(&toks)?;
            let next = model.memory.update_memory(&model.params, &stm, &ed)?;
            for l in 0..stm.n_layers() {
                let target = memattn_target(stm.layer(l), &ed.layers[l], w)?;
                sum += crate::numcore::cosine_similarity(next.layer(l), &target)?;
                n += 1;
            }
            stm = next;
        }
    }
    if n == 0 {
        return Err(Error::Data("no interactions to score".into()));
    }
    Ok(sum / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage4Config {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// σ of the noise added to the learned initial memory.
    pub stm_noise_std: f64,
    /// Encoder and memory attention stay frozen for this fraction of steps.
    pub unfreeze_fraction: f64,
    /// Dialogues start this short and grow to full length by mid-training.
    pub min_turns: usize,
    /// Score only answer tokens instead of every next-token target.
    pub answer_only: bool,
}

impl Default for Stage4Config {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            steps: 400,
            batch_size: 8,
            stm_noise_std: 0.02,
            unfreeze_fraction: 0.3,
            min_turns: 2,
            answer_only: false,
        }
    }
}

impl Stage4Config {
    /// Components updated at `step` of `total` steps.
    pub fn trainable(&self, step: usize, total: usize) -> Vec<Component> {
        let mut c = vec![Component::Embedding, Component::Decoder, Component::StmInit];
        if step as f64 >= self.unfreeze_fraction * total as f64 {
            c.extend([Component::Encoder, Component::MemoryAttention]);
        }
        c
    }

    /// Turns used at `step`: linear growth from `min_turns` to `full` over
    /// the first half of training.
    pub fn turns_at(&self, step: usize, total: usize, full: usize) -> usize {
        let lo = self.min_turns.clamp(2, full.max(2));
        let half = (total / 2).max(1);
        let grown = lo + (full.saturating_sub(lo) * step.min(half)) / half;
        grown.min(full)
    }
}

/// Keeps the first turn, the last turn, and the earliest middle turns so that
/// `k` turns remain.
pub fn shorten(d: &Dialogue, k: usize) -> Dialogue {
    let n = d.turns.len();
    if k >= n || n <= 2 {
        return d.clone();
    }
    let k = k.max(2);
    let keep: Vec<usize> = (0..k - 1).chain(std::iter::once(n - 1)).collect();
    let remap = |t: usize| keep.iter().position(|&x| x == t);
    Dialogue {
        id: d.id,
        seed: d.seed,
        turns: keep.iter().map(|&i| d.turns[i].clone()).collect(),
        fact_map: keep
            .iter()
            .map(|&i| {
                d.fact_map[i].clone().and_then(|mut f| {
                    f.source_turn = remap(f.source_turn)?;
                    Some(f)
                })
            })
            .collect(),
    }
}

/// Next-token targets of one interaction; with `answer_only`, targets before
/// the first answer token are ignored.
pub fn turn_targets(tokens: &[usize], answer_only: bool) -> Vec<usize> {
    let mut t = tokens[1..].to_vec();
    if answer_only {
        let a = tokens.iter().position(|&x| x == ANSWER).unwrap_or(0);
        for x in t.iter_mut().take(a) {
            *x = PAD;
        }
    }
    t
}

pub struct DialogueTerms {
    /// `Σ_t L_t + aux_weight·aux`.
    pub objective: Var,
    /// `Σ_t L_t`.
    pub total: Var,
    pub per_turn: Vec<Var>,
    pub aux: Var,
}

/// Unrolled dialogue: turn `t` is decoded against `STM_{t−1}`, then encoded
/// and written into memory to give `STM_t`. No truncation of the chain.
pub fn dialogue_loss(g: &mut Graph, model: &Rxt, turns: &[Vec<usize>], stm0: Vec<Var>, answer_only: bool) -> Result<DialogueTerms> {
    if turns.is_empty() {
        return Err(Error::Curriculum("dialogue has no turns".into()));
    }
    let mut stm = stm0;
    let mut per_turn = Vec::with_capacity(turns.len());
    let mut aux_terms = Vec::with_capacity(turns.len());
    for (t, toks) in turns.iter().enumerate() {
        let src: Vec<MemorySource> = stm.iter().map(|&v| MemorySource::Slots(v)).collect();
        let out = model.decode(g, &toks[..toks.len() - 1], 0, &src, None)?;
        per_turn.push(g.cross_entropy(out.logits, &turn_targets(toks, answer_only), PAD)?);
        aux_terms.push(out.aux);
        if t + 1 < turns.len() {
            let ed = model.encode(g, toks)?;
            stm = model.memory.update(g, &stm, &ed)?;
        }
    }
    let total = g.add_n(&per_turn)?;
    let aux = g.add_n(&aux_terms)?;
    let waux = g.scale(aux, model.config.moe_aux_weight)?;
    let objective = g.add(total, waux)?;
    Ok(DialogueTerms {
        objective,
        total,
        per_turn,
        aux,
    })
}

/// Learned initial memory plus `N(0, std)` noise, bound on `g`.
pub fn noisy_initial_memory(g: &mut Graph, model: &Rxt, std: f64, rng: &mut Rng) -> Result<Vec<Var>> {
    model
        .stm_init
        .iter()
        .map(|&id| {
            let p = g.param(id);
            if std > 0.0 {
                let noise = Tensor::randn(model.params.get(id).shape(), std, rng);
                let n = g.constant(noise);
                g.add(p, n)
            } else {
                Ok(p)
            }
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Stage4Losses {
    /// Batch mean of `Σ_t L_t`.
    pub total: f64,
    /// Batch mean of the per-turn losses.
    pub mean_turn: f64,
    pub aux: f64,
}

/// One optimiser step over a batch of dialogues of at least two turns,
/// honouring the freeze plan for `step` of `total_steps`.
#[allow(clippy::too_many_arguments)]
pub fn stage4_memory_aware_step(
    model: &mut Rxt,
    opt: &mut Adam,
    batch: &[Dialogue],
    cfg: &Stage4Config,
    step: usize,
    total_steps: usize,
    lr: f64,
    rng: &mut Rng,
) -> Result<Stage4Losses> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    if let Some(d) = batch.iter().find(|d| d.turns.len() < 2) {
        return Err(Error::Curriculum(format!(
            "memory-aware training needs dialogues of at least two turns; dialogue {} has {}",
            d.id,
            d.turns.len()
        )));
    }
    let mask = model.trainable_mask(&cfg.trainable(step, total_steps));
    let inv = 1.0 / batch.len() as f64;
    let mut acc = GradAccum::default();
    let mut out = Stage4Losses::default();
    for d in batch {
        let turns = d.turns.iter().map(|t| t.tokens()).collect::<Result<Vec<_>>>()?;
        let mut g = Graph::new(&model.params).with_trainable(&mask);
        let stm0 = noisy_initial_memory(&mut g, model, cfg.stm_noise_std, rng)?;
        let terms = dialogue_loss(&mut g, model, &turns, stm0, cfg.answer_only)?;
        let grads = g.backward(terms.objective)?;
        acc.add(g.param_grads(&grads), inv);
        let total = g.value(terms.total).item();
        out.total += inv * total;
        out.mean_turn += inv * total / turns.len() as f64;
        out.aux += inv * g.value(terms.aux).item();
    }
    opt.step(&mut model.params, &acc.into_vec(), lr)?;
    Ok(out)
}

/// Supervised step for the stateless baseline on single interactions.
pub fn baseline_step(model: &mut Baseline, opt: &mut Adam, batch: &[Vec<usize>], answer_only: bool, lr: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let inv = 1.0 / batch.len() as f64;
    let mut acc = GradAccum::default();
    let mut total = 0.0;
    for toks in batch {
        let mut g = Graph::new(&model.params);
        let out = model.forward(&mut g, &toks[..toks.len() - 1], 0, None)?;
        let ce = g.cross_entropy(out.logits, &turn_targets(toks, answer_only), PAD)?;
        let waux = g.scale(out.aux, model.config.moe_aux_weight)?;
        let obj = g.add(ce, waux)?;
        let grads = g.backward(obj)?;
        acc.add(g.param_grads(&grads), inv);
        total += inv * g.value(ce).item();
    }
    opt.step(&mut model.params, &acc.into_vec(), lr)?;
    Ok(total)
}

/// Warm-up then cosine decay to a tenth of `base`.
pub fn lr_at(step: usize, total: usize, base: f64) -> f64 {
    let warm = (total / 20).clamp(1, 50);
    if step < warm {
        return base * (step + 1) as f64 / warm as f64;
    }
    let span = total.saturating_sub(warm).max(1);
    let p = ((step - warm) as f64 / span as f64).min(1.0);
    base * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
}
