//! Attention-based memory: the short-term memory state, the read path used by
//! the decoder, and the gated write network that folds each finished
//! interaction into memory.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, MultiHeadAttention};
use crate::error::{Error, Result};
use crate::numcore::{GateMix, Graph, Mask, ParamId, ParamStore, Rng, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryAttentionVariant {
    Simple,
    SelfAttn,
    Interlayer,
    GatedSelfInterlayer,
}

impl MemoryAttentionVariant {
    pub const ALL: [MemoryAttentionVariant; 4] = [
        MemoryAttentionVariant::Simple,
        MemoryAttentionVariant::SelfAttn,
        MemoryAttentionVariant::Interlayer,
        MemoryAttentionVariant::GatedSelfInterlayer,
    ];

    fn uses_self(self) -> bool {
        matches!(self, Self::SelfAttn | Self::GatedSelfInterlayer)
    }

    fn uses_interlayer(self) -> bool {
        matches!(self, Self::Interlayer | Self::GatedSelfInterlayer)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateActivation {
    Sigmoid,
    Tanh,
    /// Plain residual `prev + update`.
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateDynamics {
    /// `G = act((prev + update)·W + b)`.
    Dynamic,
    /// `G = act(c)`, one learned vector broadcast over slots.
    Static,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResidualGateConfig {
    pub activation: GateActivation,
    pub dynamics: GateDynamics,
    /// Must be set to use `GateActivation::None`.
    #[serde(default)]
    pub allow_ungated: bool,
}

impl Default for ResidualGateConfig {
    fn default() -> Self {
        Self {
            activation: GateActivation::Sigmoid,
            dynamics: GateDynamics::Dynamic,
            allow_ungated: false,
        }
    }
}

impl ResidualGateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.activation == GateActivation::None && !self.allow_ungated {
            return Err(Error::Config(
                "ungated memory updates need allow_ungated = true".into(),
            ));
        }
        Ok(())
    }
}

/// Memory state: one `[S_mem×D]` slot matrix per layer plus the number of
/// committed updates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShortTermMemory {
    slots: Vec<Tensor>,
    version: u64,
}

impl ShortTermMemory {
    pub fn new(slots: Vec<Tensor>) -> Result<Self> {
        let first = slots
            .first()
            .ok_or_else(|| Error::invalid("stm", "needs at least one layer"))?;
        if first.ndim() != 2 || first.rows() == 0 {
            return Err(Error::invalid("stm", "layers must be non-empty matrices"));
        }
        for s in &slots {
            if s.shape() != first.shape() {
                return Err(Error::shape("stm", first.shape(), s.shape()));
            }
            if !s.is_finite() {
                return Err(Error::NonFinite { op: "stm" });
            }
        }
        Ok(Self { slots, version: 0 })
    }

    pub fn layers(&self) -> &[Tensor] {
        &self.slots
    }

    pub fn layer(&self, l: usize) -> &Tensor {
        &self.slots[l]
    }

    pub fn n_layers(&self) -> usize {
        self.slots.len()
    }

    pub fn slots_per_layer(&self) -> usize {
        self.slots[0].rows()
    }

    pub fn dim(&self) -> usize {
        self.slots[0].cols()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn numel(&self) -> usize {
        self.slots.iter().map(Tensor::numel).sum()
    }

    /// The successor state; shape must match and the version advances by one.
    pub fn successor(&self, slots: Vec<Tensor>) -> Result<Self> {
        if slots.len() != self.slots.len() {
            return Err(Error::LayerMismatch {
                expected: self.slots.len(),
                got: slots.len(),
            });
        }
        let mut next = Self::new(slots)?;
        if next.slots[0].shape() != self.slots[0].shape() {
            return Err(Error::shape("stm successor", self.slots[0].shape(), next.slots[0].shape()));
        }
        next.version = self.version + 1;
        Ok(next)
    }

    /// Binds each layer as a constant on `g`.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.slots.iter().map(|s| g.constant(s.clone())).collect()
    }
}

/// Per-layer encoder hidden states of one interaction.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedData {
    pub layers: Vec<Tensor>,
}

impl EncodedData {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, Tensor::rows)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.layers.iter().map(|s| g.constant(s.clone())).collect()
    }
}

/// Learned interpolation between a previous state and its update.
#[derive(Clone, Debug)]
pub struct ResidualGate {
    pub cfg: ResidualGateConfig,
    /// Dynamic gates only.
    pub weight: Option<ParamId>,
    /// Bias for dynamic gates; the constant pre-activation for static ones.
    pub bias: Option<ParamId>,
}

impl ResidualGate {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, cfg: ResidualGateConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        if cfg.activation == GateActivation::None {
            return Ok(Self {
                cfg,
                weight: None,
                bias: None,
            });
        }
        let weight = match cfg.dynamics {
            GateDynamics::Dynamic => Some(store.insert(
                format!("{prefix}.w"),
                Tensor::randn(&[dim, dim], 1.0 / (dim as f64), rng),
            )),
            GateDynamics::Static => None,
        };
        let bias = Some(store.insert(format!("{prefix}.b"), Tensor::zeros(&[dim])));
        Ok(Self { cfg, weight, bias })
    }

    /// Gate values `G[S×D]`, or `None` for the ungated residual.
    pub fn values(&self, g: &mut Graph, prev: Var, update: Var) -> Result<Option<Var>> {
        let Some(bias) = self.bias else {
            return Ok(None);
        };
        let b = g.param(bias);
        let pre = match self.weight {
            Some(w) => {
                let w = g.param(w);
                let s = g.add(prev, update)?;
                let z = g.matmul(s, w)?;
                g.add_row(z, b)?
            }
            None => {
                let zeros = Tensor::zeros(g.shape(prev));
                let zeros = g.constant(zeros);
                g.add_row(zeros, b)?
            }
        };
        let gate = match self.cfg.activation {
            GateActivation::Sigmoid => g.sigmoid(pre)?,
            GateActivation::Tanh => g.tanh(pre)?,
            GateActivation::None => unreachable!("ungated has no bias"),
        };
        Ok(Some(gate))
    }
}

/// Sigmoid: `(1−G)⊙prev + G⊙update`. Tanh: `(1−G)⊙prev + (1+G)⊙update`.
/// None: `prev + update`.
pub fn gate_apply(g: &mut Graph, gate: &ResidualGate, prev: Var, update: Var) -> Result<Var> {
    match gate.values(g, prev, update)? {
        None => g.add(prev, update),
        Some(gv) => {
            let mix = match gate.cfg.activation {
                GateActivation::Tanh => GateMix::Tanh,
                _ => GateMix::Convex,
            };
            g.gate_mix(prev, update, gv, mix)
        }
    }
}

/// Projected memory keys and values of one layer, computed once per turn.
#[derive(Clone, Debug)]
pub struct MemoryKv {
    pub layer: usize,
    pub k: Arc<Tensor>,
    pub v: Arc<Tensor>,
}

impl MemoryKv {
    pub fn elements(&self) -> usize {
        self.k.numel() + self.v.numel()
    }
}

/// Where a memory read takes its keys and values from.
#[derive(Clone, Copy, Debug)]
pub enum MemorySource<'a> {
    Slots(Var),
    Precomputed(&'a MemoryKv),
}

pub fn precompute_memory_kv(store: &ParamStore, read: &MultiHeadAttention, layer: usize, stm_layer: &Tensor) -> Result<MemoryKv> {
    let mut g = Graph::no_grad(store);
    let s = g.constant(stm_layer.clone());
    let (k, v) = read.project_kv(&mut g, s)?;
    Ok(MemoryKv {
        layer,
        k: g.arc(k),
        v: g.arc(v),
    })
}

/// Decoder states (queries, rotated by `positions`) attend over memory slots
/// (keys/values, unrotated). `layer` must match a precomputed source.
pub fn memory_read(
    g: &mut Graph,
    read: &MultiHeadAttention,
    layer: usize,
    h_dec: Var,
    positions: &[usize],
    src: MemorySource<'_>,
) -> Result<Var> {
    match src {
        MemorySource::Slots(stm) => read.cross_attention(g, h_dec, Some(positions), stm),
        MemorySource::Precomputed(kv) => {
            if kv.layer != layer {
                return Err(Error::LayerMismatch {
                    expected: layer,
                    got: kv.layer,
                });
            }
            let q = read.project_q(g, h_dec)?;
            let q = g.rope(q, positions, read.cfg.head_dim, read.cfg.rope_base)?;
            let k = g.shared(Arc::clone(&kv.k), false);
            let v = g.shared(Arc::clone(&kv.v), false);
            read.attend(g, q, k, v, &Mask::None)
        }
    }
}

/// Slots (queries) attend over the interaction's encoded rows.
pub fn memory_write_attend(g: &mut Graph, write: &MultiHeadAttention, stm_prev: Var, ed: Var) -> Result<Var> {
    if g.shape(ed)[0] == 0 {
        return Err(Error::invalid("memory_write_attend", "encoded data is empty"));
    }
    write.cross_attention(g, stm_prev, None, ed)
}

/// Slots attend to each other.
pub fn memory_self_attend(g: &mut Graph, attn: &MultiHeadAttention, stm: Var) -> Result<Var> {
    attn.cross_attention(g, stm, None, stm)
}

/// Mean of every layer except `layer`.
pub fn other_layers_mean(g: &mut Graph, stm_all: &[Var], layer: usize) -> Result<Var> {
    if stm_all.len() < 2 {
        return Err(Error::Config("interlayer memory attention needs at least two layers".into()));
    }
    let others: Vec<Var> = stm_all
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != layer)
        .map(|(_, &v)| v)
        .collect();
    let sum = g.add_n(&others)?;
    g.scale(sum, 1.0 / others.len() as f64)
}

/// Layer `layer`'s slots attend over the mean of the other layers' slots.
pub fn interlayer_attend(g: &mut Graph, attn: &MultiHeadAttention, stm_all: &[Var], layer: usize) -> Result<Var> {
    let kv = other_layers_mean(g, stm_all, layer)?;
    attn.cross_attention(g, stm_all[layer], None, kv)
}

#[derive(Clone, Debug)]
pub struct GatedStep {
    pub attn: MultiHeadAttention,
    pub gate: ResidualGate,
}

#[derive(Clone, Debug)]
pub struct MemoryAttentionLayer {
    pub self_step: Option<GatedStep>,
    pub inter_step: Option<GatedStep>,
    pub write: GatedStep,
}

/// The memory write network for every layer.
#[derive(Clone, Debug)]
pub struct MemoryAttention {
    pub variant: MemoryAttentionVariant,
    pub layers: Vec<MemoryAttentionLayer>,
}

impl MemoryAttention {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        n_layers: usize,
        attn: AttentionConfig,
        variant: MemoryAttentionVariant,
        gate: ResidualGateConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        if variant.uses_interlayer() && n_layers < 2 {
            return Err(Error::Config(format!("{variant:?} memory attention needs at least two layers")));
        }
        let d = attn.model_dim();
        let mut step = |name: String, rng: &mut Rng| -> Result<GatedStep> {
            Ok(GatedStep {
                attn: MultiHeadAttention::new(store, &format!("{name}.attn"), attn, 1.0, rng),
                gate: ResidualGate::new(store, &format!("{name}.gate"), d, gate, rng)?,
            })
        };
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let self_step = if variant.uses_self() {
                Some(step(format!("{prefix}.{l}.self"), rng)?)
            } else {
                None
            };
            let inter_step = if variant.uses_interlayer() {
                Some(step(format!("{prefix}.{l}.inter"), rng)?)
            } else {
                None
            };
            let write = step(format!("{prefix}.{l}.write"), rng)?;
            layers.push(MemoryAttentionLayer {
                self_step,
                inter_step,
                write,
            });
        }
        Ok(Self { variant, layers })
    }

    /// Computes the next state of every layer, returning `(update, next)` per
    /// layer. The final gate always mixes against the layer's previous state.
    pub fn update_with_parts(&self, g: &mut Graph, prev: &[Var], ed: &[Var]) -> Result<Vec<(Var, Var)>> {
        if prev.len() != self.layers.len() {
            return Err(Error::LayerMismatch {
                expected: self.layers.len(),
                got: prev.len(),
            });
        }
        if ed.len() != self.layers.len() {
            return Err(Error::LayerMismatch {
                expected: self.layers.len(),
                got: ed.len(),
            });
        }
        let mut out = Vec::with_capacity(prev.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut s = prev[l];
            if let Some(step) = &layer.self_step {
                let upd = memory_self_attend(g, &step.attn, s)?;
                s = gate_apply(g, &step.gate, s, upd)?;
            }
            if let Some(step) = &layer.inter_step {
                let kv = other_layers_mean(g, prev, l)?;
                let upd = step.attn.cross_attention(g, s, None, kv)?;
                s = gate_apply(g, &step.gate, s, upd)?;
            }
            let update = memory_write_attend(g, &layer.write.attn, s, ed[l])?;
            let next = gate_apply(g, &layer.write.gate, prev[l], update)?;
            out.push((update, next));
        }
        Ok(out)
    }

    pub fn update(&self, g: &mut Graph, prev: &[Var], ed: &[Var]) -> Result<Vec<Var>> {
        Ok(self.update_with_parts(g, prev, ed)?.into_iter().map(|(_, n)| n).collect())
    }

    /// Value-level update used at inference.
    pub fn update_memory(&self, store: &ParamStore, stm_prev: &ShortTermMemory, ed: &EncodedData) -> Result<ShortTermMemory> {
        let mut g = Graph::no_grad(store);
        let prev = stm_prev.bind(&mut g);
        let edv = ed.bind(&mut g);
        let next = self.update(&mut g, &prev, &edv)?;
        let slots = next.into_iter().map(|v| g.value(v).clone()).collect();
        stm_prev.successor(slots)
    }

    /// Every gate on the final (write) step of every layer.
    pub fn write_gates(&self) -> impl Iterator<Item = &ResidualGate> {
        self.layers.iter().map(|l| &l.write.gate)
    }
}
