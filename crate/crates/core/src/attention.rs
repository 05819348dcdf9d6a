//! Multi-head attention with rotary positions and an incremental KV cache.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Graph, Mask, ParamId, ParamStore, Rng, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub n_heads: usize,
    pub head_dim: usize,
    pub rope_base: f64,
}

impl AttentionConfig {
    pub fn new(model_dim: usize, n_heads: usize, rope_base: f64) -> Result<Self> {
        if n_heads == 0 || model_dim % n_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {model_dim} is not divisible by {n_heads} heads"
            )));
        }
        Ok(Self {
            n_heads,
            head_dim: model_dim / n_heads,
            rope_base,
        })
    }

    pub fn model_dim(&self) -> usize {
        self.n_heads * self.head_dim
    }
}

/// Which projected streams receive rotary positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RopeMode {
    QueriesAndKeys,
    /// Memory cross-attention: memory slots carry no position.
    QueriesOnly,
}

/// Rotates each head of `x[T×model_dim]` by its row's position.
pub fn rope_apply(tape: &mut Tape, x: Var, positions: &[usize], cfg: &AttentionConfig) -> Result<Var> {
    tape.rope(x, positions, cfg.head_dim, cfg.rope_base)
}

/// Query/key/value/output projections of one attention block.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub cfg: AttentionConfig,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: AttentionConfig, out_scale: f64, rng: &mut Rng) -> Self {
        let d = cfg.model_dim();
        let std = 1.0 / (d as f64).sqrt();
        let mut w = |name: &str, s: f64| store.insert(format!("{prefix}.{name}"), Tensor::randn(&[d, d], s, rng));
        Self {
            cfg,
            wq: w("wq", std),
            wk: w("wk", std),
            wv: w("wv", std),
            wo: w("wo", std * out_scale),
        }
    }

    pub fn project_q(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.wq);
        g.matmul(x, w)
    }

    pub fn project_kv(&self, g: &mut Graph, src: Var) -> Result<(Var, Var)> {
        let wk = g.param(self.wk);
        let wv = g.param(self.wv);
        let k = g.matmul(src, wk)?;
        let v = g.matmul(src, wv)?;
        Ok((k, v))
    }

    /// Per-head softmax(QKᵀ/√head_dim)·V on projected inputs, heads
    /// concatenated, then the output projection.
    pub fn attend(&self, g: &mut Graph, q: Var, k: Var, v: Var, mask: &Mask) -> Result<Var> {
        let heads = g.attention(q, k, v, self.cfg.n_heads, mask)?;
        let wo = g.param(self.wo);
        g.matmul(heads, wo)
    }

    /// Full-sequence self-attention over `x[T×D]`, rotary on both streams.
    pub fn self_attention(&self, g: &mut Graph, x: Var, positions: &[usize], mask: &Mask) -> Result<Var> {
        let q = self.project_q(g, x)?;
        let (k, v) = self.project_kv(g, x)?;
        let q = rope_apply(g, q, positions, &self.cfg)?;
        let k = rope_apply(g, k, positions, &self.cfg)?;
        self.attend(g, q, k, v, mask)
    }

    /// Attention of `query_src` over an unordered key/value source; rotary
    /// positions only on the queries.
    pub fn cross_attention(&self, g: &mut Graph, query_src: Var, positions: Option<&[usize]>, kv_src: Var) -> Result<Var> {
        let q = self.project_q(g, query_src)?;
        let q = match positions {
            Some(p) => rope_apply(g, q, p, &self.cfg)?,
            None => q,
        };
        let (k, v) = self.project_kv(g, kv_src)?;
        self.attend(g, q, k, v, &Mask::None)
    }

    /// Causal self-attention for a chunk of new rows whose keys/values are
    /// appended to `cache` first. `positions` must start at the cache length.
    pub fn cached_self_attention(&self, g: &mut Graph, x: Var, positions: &[usize], cache: &mut LayerCache) -> Result<Var> {
        let start = cache.len();
        if positions.first() != Some(&start) {
            return Err(Error::invalid(
                "self_attention_step",
                format!("position {:?} does not continue cache of length {start}", positions.first()),
            ));
        }
        let q = self.project_q(g, x)?;
        let (k, v) = self.project_kv(g, x)?;
        let q = rope_apply(g, q, positions, &self.cfg)?;
        let k = rope_apply(g, k, positions, &self.cfg)?;
        cache.append(g.value(k), g.value(v))?;
        let kc = g.shared(cache.keys(), false);
        let vc = g.shared(cache.values(), false);
        self.attend(g, q, kc, vc, &Mask::Causal { offset: start })
    }
}

/// Single-token incremental self-attention: `x_new[1×D]` at `position`.
pub fn self_attention_step(
    g: &mut Graph,
    attn: &MultiHeadAttention,
    x_new: Var,
    cache: &mut LayerCache,
    position: usize,
) -> Result<Var> {
    if g.shape(x_new)[0] != 1 {
        return Err(Error::invalid("self_attention_step", "expects a single row"));
    }
    attn.cached_self_attention(g, x_new, &[position], cache)
}

/// Keys and values of one layer for the current interaction.
#[derive(Clone, Debug)]
pub struct LayerCache {
    k: Arc<Tensor>,
    v: Arc<Tensor>,
    capacity: usize,
}

impl LayerCache {
    pub fn new(model_dim: usize, capacity: usize) -> Self {
        Self {
            k: Arc::new(Tensor::zeros(&[0, model_dim])),
            v: Arc::new(Tensor::zeros(&[0, model_dim])),
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.k.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn keys(&self) -> Arc<Tensor> {
        Arc::clone(&self.k)
    }

    pub fn values(&self) -> Arc<Tensor> {
        Arc::clone(&self.v)
    }

    pub fn append(&mut self, k: &Tensor, v: &Tensor) -> Result<()> {
        if self.len() + k.rows() > self.capacity {
            return Err(Error::CacheOverflow {
                capacity: self.capacity,
            });
        }
        Arc::make_mut(&mut self.k).append_rows(k)?;
        Arc::make_mut(&mut self.v).append_rows(v)?;
        Ok(())
    }

    pub fn clear(&mut self) {
        let d = self.k.cols();
        self.k = Arc::new(Tensor::zeros(&[0, d]));
        self.v = Arc::new(Tensor::zeros(&[0, d]));
    }

    pub fn elements(&self) -> usize {
        self.k.numel() + self.v.numel()
    }
}

/// Per-layer self-attention caches for one interaction.
#[derive(Clone, Debug)]
pub struct KvCache {
    layers: Vec<LayerCache>,
}

impl KvCache {
    pub fn new(n_layers: usize, model_dim: usize, capacity: usize) -> Self {
        Self {
            layers: (0..n_layers).map(|_| LayerCache::new(model_dim, capacity)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, LayerCache::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn capacity(&self) -> usize {
        self.layers.first().map_or(0, LayerCache::capacity)
    }

    pub fn layer_mut(&mut self, i: usize) -> &mut LayerCache {
        &mut self.layers[i]
    }

    pub fn layer(&self, i: usize) -> &LayerCache {
        &self.layers[i]
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn clear(&mut self) {
        self.layers.iter_mut().for_each(LayerCache::clear);
    }

    pub fn elements(&self) -> usize {
        self.layers.iter().map(LayerCache::elements).sum()
    }
}
