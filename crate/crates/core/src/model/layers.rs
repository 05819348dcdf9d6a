use crate::abms::{memory_read, MemorySource};
use crate::attention::{AttentionConfig, KvCache, MultiHeadAttention};
use crate::error::{Error, Result};
use crate::numcore::{Graph, Mask, ParamId, ParamStore, Rng, Tensor, Var, NORM_EPS};

#[derive(Clone, Copy, Debug)]
pub struct RmsNorm {
    pub gain: ParamId,
}

impl RmsNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.insert(name, Tensor::full(&[dim], 1.0)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        g.rms_norm(x, gain, NORM_EPS)
    }
}

/// `silu(x·W1 + b1)·W2 + b2`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, hidden: usize, out_scale: f64, rng: &mut Rng) -> Self {
        Self {
            w1: store.insert(format!("{prefix}.w1"), Tensor::randn(&[dim, hidden], 1.0 / (dim as f64).sqrt(), rng)),
            b1: store.insert(format!("{prefix}.b1"), Tensor::zeros(&[hidden])),
            w2: store.insert(
                format!("{prefix}.w2"),
                Tensor::randn(&[hidden, dim], out_scale / (hidden as f64).sqrt(), rng),
            ),
            b2: store.insert(format!("{prefix}.b2"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (w1, b1, w2, b2) = (g.param(self.w1), g.param(self.b1), g.param(self.w2), g.param(self.b2));
        let h = g.matmul(x, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.silu(h)?;
        let y = g.matmul(h, w2)?;
        g.add_row(y, b2)
    }
}

/// Token-level top-k mixture of feed-forward experts.
#[derive(Clone, Debug)]
pub struct MixtureOfExperts {
    pub router: ParamId,
    pub experts: Vec<FeedForward>,
    pub top_k: usize,
}

impl MixtureOfExperts {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        hidden: usize,
        n_experts: usize,
        top_k: usize,
        out_scale: f64,
        rng: &mut Rng,
    ) -> Self {
        let router = store.insert(
            format!("{prefix}.router"),
            Tensor::randn(&[dim, n_experts], 1.0 / (dim as f64).sqrt(), rng),
        );
        let experts = (0..n_experts)
            .map(|e| FeedForward::new(store, &format!("{prefix}.expert{e}"), dim, hidden, out_scale, rng))
            .collect();
        Self { router, experts, top_k }
    }

    /// Returns the combined output and the load-balance loss
    /// `mean_e (mean_t p[t,e] − 1/E)²`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
        let (t, d) = (g.shape(x)[0], g.shape(x)[1]);
        let n = self.experts.len();
        let wr = g.param(self.router);
        let logits = g.matmul(x, wr)?;
        let probs = g.softmax(logits, 1)?;
        let (weights, selected) = g.topk_renorm(probs, self.top_k)?;
        let mut rows = vec![Vec::new(); n];
        for (i, sel) in selected.iter().enumerate() {
            for &e in sel {
                rows[e].push(i);
            }
        }
        let mut parts = Vec::new();
        for (e, expert) in self.experts.iter().enumerate() {
            if rows[e].is_empty() {
                continue;
            }
            let xe = g.gather_rows(x, &rows[e])?;
            let ye = expert.forward(g, xe)?;
            let we = g.select_col(weights, e, &rows[e])?;
            let ye = g.mul_col(ye, we)?;
            parts.push((ye, std::mem::take(&mut rows[e])));
        }
        let out = g.scatter_add_rows(parts, t, d)?;

        let load = g.mean_rows(probs)?;
        let uniform = g.constant(Tensor::full(&[n], 1.0 / n as f64));
        let dev = g.sub(load, uniform)?;
        let sq = g.mul(dev, dev)?;
        let aux = g.mean(sq)?;
        Ok((out, aux))
    }
}

/// Pre-norm decoder block: causal self-attention, optional memory
/// cross-attention, mixture-of-experts feed-forward.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_norm: RmsNorm,
    pub self_attn: MultiHeadAttention,
    pub cross: Option<(RmsNorm, MultiHeadAttention)>,
    pub ffn_norm: RmsNorm,
    pub moe: MixtureOfExperts,
}

/// Pre-norm encoder block: bidirectional self-attention, dense feed-forward.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn_norm: RmsNorm,
    pub attn: MultiHeadAttention,
    pub ffn_norm: RmsNorm,
    pub ffn: FeedForward,
}

pub(crate) struct StackDims {
    pub dim: usize,
    pub hidden: usize,
    pub experts: usize,
    pub top_k: usize,
    pub attn: AttentionConfig,
    pub out_scale: f64,
}

impl DecoderLayer {
    pub(crate) fn new(store: &mut ParamStore, prefix: &str, dims: &StackDims, with_memory: bool, rng: &mut Rng) -> Self {
        let self_norm = RmsNorm::new(store, &format!("{prefix}.self_norm"), dims.dim);
        let self_attn = MultiHeadAttention::new(store, &format!("{prefix}.self_attn"), dims.attn, dims.out_scale, rng);
        let cross = with_memory.then(|| {
            (
                RmsNorm::new(store, &format!("{prefix}.mem_norm"), dims.dim),
                MultiHeadAttention::new(store, &format!("{prefix}.mem_attn"), dims.attn, dims.out_scale, rng),
            )
        });
        let ffn_norm = RmsNorm::new(store, &format!("{prefix}.ffn_norm"), dims.dim);
        let moe = MixtureOfExperts::new(
            store,
            &format!("{prefix}.moe"),
            dims.dim,
            dims.hidden,
            dims.experts,
            dims.top_k,
            dims.out_scale,
            rng,
        );
        Self {
            self_norm,
            self_attn,
            cross,
            ffn_norm,
            moe,
        }
    }
}

impl EncoderLayer {
    pub(crate) fn new(store: &mut ParamStore, prefix: &str, dims: &StackDims, rng: &mut Rng) -> Self {
        Self {
            attn_norm: RmsNorm::new(store, &format!("{prefix}.attn_norm"), dims.dim),
            attn: MultiHeadAttention::new(store, &format!("{prefix}.attn"), dims.attn, dims.out_scale, rng),
            ffn_norm: RmsNorm::new(store, &format!("{prefix}.ffn_norm"), dims.dim),
            ffn: FeedForward::new(store, &format!("{prefix}.ffn"), dims.dim, dims.hidden, dims.out_scale, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, positions: &[usize]) -> Result<Var> {
        let h = self.attn_norm.forward(g, x)?;
        let a = self.attn.self_attention(g, h, positions, &Mask::None)?;
        let x = g.add(x, a)?;
        let h = self.ffn_norm.forward(g, x)?;
        let f = self.ffn.forward(g, h)?;
        g.add(x, f)
    }
}

pub struct DecoderOutput {
    pub logits: Var,
    /// Final normalised hidden states.
    pub hidden: Var,
    /// Load-balance loss summed over layers.
    pub aux: Var,
}

/// Causal decoder stack with a tied output head.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub layers: Vec<DecoderLayer>,
    pub final_norm: RmsNorm,
}

impl Decoder {
    /// Runs `tokens` at positions `start..start+T`. With `caches`, keys and
    /// values are appended to the per-layer caches (which must hold exactly
    /// `start` rows); without, `start` must be 0 and a causal mask is used.
    /// `memory` holds one source per layer for memory-reading stacks and is
    /// empty otherwise.
    pub fn forward(
        &self,
        g: &mut Graph,
        embed: ParamId,
        tokens: &[usize],
        start: usize,
        memory: &[MemorySource<'_>],
        mut caches: Option<&mut KvCache>,
    ) -> Result<DecoderOutput> {
        let has_memory = self.layers.first().is_some_and(|l| l.cross.is_some());
        let expect = if has_memory { self.layers.len() } else { 0 };
        if memory.len() != expect {
            return Err(Error::LayerMismatch {
                expected: expect,
                got: memory.len(),
            });
        }
        if let Some(c) = caches.as_deref() {
            if c.n_layers() != self.layers.len() || c.len() != start {
                return Err(Error::invalid("decoder_forward", "cache does not match the position"));
            }
        } else if start != 0 {
            return Err(Error::invalid("decoder_forward", "a non-zero start needs caches"));
        }
        let positions: Vec<usize> = (start..start + tokens.len()).collect();
        let table = g.param(embed);
        let mut x = g.embedding(table, tokens)?;
        let mut aux_terms = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let h = layer.self_norm.forward(g, x)?;
            let a = match caches.as_deref_mut() {
                Some(c) => layer.self_attn.cached_self_attention(g, h, &positions, c.layer_mut(l))?,
                None => layer
                    .self_attn
                    .self_attention(g, h, &positions, &Mask::Causal { offset: 0 })?,
            };
            x = g.add(x, a)?;
            if let Some((norm, read)) = &layer.cross {
                let h = norm.forward(g, x)?;
                let r = memory_read(g, read, l, h, &positions, memory[l])?;
                x = g.add(x, r)?;
            }
            let h = layer.ffn_norm.forward(g, x)?;
            let (f, aux) = layer.moe.forward(g, h)?;
            x = g.add(x, f)?;
            aux_terms.push(aux);
        }
        let hidden = self.final_norm.forward(g, x)?;
        let logits = g.matmul_t(hidden, table)?;
        let aux = if aux_terms.is_empty() {
            g.constant(Tensor::scalar(0.0))
        } else {
            g.add_n(&aux_terms)?
        };
        Ok(DecoderOutput { logits, hidden, aux })
    }
}
