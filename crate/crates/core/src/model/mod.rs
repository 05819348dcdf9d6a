//! Model assembly: the reactive encoder/decoder/memory model and the
//! stateless decoder-only baseline, both over one shared token embedding.

pub mod checkpoint;
mod config;
mod layers;
pub mod tokenizer;

pub use config::ModelConfig;
pub use layers::{Decoder, DecoderLayer, DecoderOutput, EncoderLayer, FeedForward, MixtureOfExperts, RmsNorm};

use crate::abms::{precompute_memory_kv, EncodedData, MemoryAttention, MemoryKv, MemorySource, ShortTermMemory};
use crate::attention::KvCache;
use crate::error::{Error, Result};
use crate::numcore::{Graph, ParamId, ParamStore, Rng, Tensor, Var};
use layers::StackDims;

/// Parameter groups, by name prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Component {
    Embedding,
    Decoder,
    Encoder,
    MemoryAttention,
    MlmHead,
    StmInit,
}

impl Component {
    pub const ALL: [Component; 6] = [
        Component::Embedding,
        Component::Decoder,
        Component::Encoder,
        Component::MemoryAttention,
        Component::MlmHead,
        Component::StmInit,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            Component::Embedding => "embed",
            Component::Decoder => "decoder.",
            Component::Encoder => "encoder.",
            Component::MemoryAttention => "memory.",
            Component::MlmHead => "mlm.",
            Component::StmInit => "stm_init.",
        }
    }

    pub fn of(name: &str) -> Option<Component> {
        Self::ALL.into_iter().find(|c| name.starts_with(c.prefix()))
    }
}

/// Per-component parameter counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCensus {
    pub parts: Vec<(Component, usize)>,
    pub total: usize,
}

impl ParamCensus {
    fn of(store: &ParamStore) -> Self {
        let parts = Component::ALL
            .into_iter()
            .map(|c| (c, store.numel_with_prefix(c.prefix())))
            .filter(|&(_, n)| n > 0)
            .collect();
        Self {
            parts,
            total: store.numel(),
        }
    }

    pub fn get(&self, c: Component) -> usize {
        self.parts.iter().find(|(p, _)| *p == c).map_or(0, |&(_, n)| n)
    }
}

fn trainable_mask(store: &ParamStore, trainable: &[Component]) -> Vec<bool> {
    store
        .ids()
        .map(|id| Component::of(store.name(id)).is_some_and(|c| trainable.contains(&c)))
        .collect()
}

fn check_tokens(tokens: &[usize], vocab: usize, start: usize, limit: usize) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::invalid("forward", "empty token sequence"));
    }
    if start + tokens.len() > limit {
        return Err(Error::LengthOverflow {
            len: start + tokens.len(),
            limit,
        });
    }
    if let Some(&id) = tokens.iter().find(|&&t| t >= vocab) {
        return Err(Error::UnknownToken { id, vocab });
    }
    Ok(())
}

fn stack_dims(cfg: &ModelConfig) -> Result<StackDims> {
    Ok(StackDims {
        dim: cfg.model_dim,
        hidden: cfg.ffn_hidden,
        experts: cfg.moe_experts,
        top_k: cfg.moe_top_k,
        attn: cfg.attention()?,
        out_scale: 1.0 / ((2 * cfg.n_layers.max(1)) as f64).sqrt(),
    })
}

fn build_decoder(store: &mut ParamStore, cfg: &ModelConfig, with_memory: bool, rng: &mut Rng) -> Result<Decoder> {
    let dims = stack_dims(cfg)?;
    let layers = (0..cfg.n_layers)
        .map(|l| DecoderLayer::new(store, &format!("decoder.{l}"), &dims, with_memory, rng))
        .collect();
    let final_norm = RmsNorm::new(store, "decoder.final_norm", cfg.model_dim);
    Ok(Decoder { layers, final_norm })
}

fn embedding_table(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) -> ParamId {
    let std = 1.0 / (cfg.model_dim as f64).sqrt();
    store.insert("embed", Tensor::randn(&[cfg.vocab_size, cfg.model_dim], std, rng))
}

/// Dense projection from encoder states to vocabulary logits.
#[derive(Clone, Debug)]
pub struct MlmHead {
    pub norm: RmsNorm,
    pub w: ParamId,
    pub b: ParamId,
}

impl MlmHead {
    pub fn forward(&self, g: &mut Graph, hidden: Var) -> Result<Var> {
        let h = self.norm.forward(g, hidden)?;
        let (w, b) = (g.param(self.w), g.param(self.b));
        let z = g.matmul(h, w)?;
        g.add_row(z, b)
    }
}

/// The reactive model.
#[derive(Clone, Debug)]
pub struct Rxt {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub embed: ParamId,
    pub decoder: Decoder,
    pub encoder: Vec<EncoderLayer>,
    pub memory: MemoryAttention,
    pub mlm: MlmHead,
    pub stm_init: Vec<ParamId>,
}

impl Rxt {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.seed);
        let mut params = ParamStore::new();
        let d = config.model_dim;
        let embed = embedding_table(&mut params, &config, &mut rng);
        let decoder = build_decoder(&mut params, &config, true, &mut rng)?;
        let dims = stack_dims(&config)?;
        let encoder = (0..config.n_layers)
            .map(|l| EncoderLayer::new(&mut params, &format!("encoder.{l}"), &dims, &mut rng))
            .collect();
        let memory = MemoryAttention::new(
            &mut params,
            "memory",
            config.n_layers,
            dims.attn,
            config.variant,
            config.gate,
            &mut rng,
        )?;
        let mlm = MlmHead {
            norm: RmsNorm::new(&mut params, "mlm.norm", d),
            w: params.insert("mlm.w", Tensor::randn(&[d, config.vocab_size], 1.0 / (d as f64).sqrt(), &mut rng)),
            b: params.insert("mlm.b", Tensor::zeros(&[config.vocab_size])),
        };
        let stm_init = (0..config.n_layers)
            .map(|l| params.insert(format!("stm_init.{l}"), Tensor::randn(&[config.stm_slots, d], 0.1, &mut rng)))
            .collect();
        Ok(Self {
            config,
            params,
            embed,
            decoder,
            encoder,
            memory,
            mlm,
            stm_init,
        })
    }

    pub fn census(&self) -> ParamCensus {
        ParamCensus::of(&self.params)
    }

    /// Per-parameter trainability for the given components.
    pub fn trainable_mask(&self, trainable: &[Component]) -> Vec<bool> {
        trainable_mask(&self.params, trainable)
    }

    /// Decoder pass over one interaction's tokens at positions
    /// `start..start+T`, reading memory from `memory` (one source per layer).
    pub fn decode(
        &self,
        g: &mut Graph,
        tokens: &[usize],
        start: usize,
        memory: &[MemorySource<'_>],
        caches: Option<&mut KvCache>,
    ) -> Result<DecoderOutput> {
        check_tokens(tokens, self.config.vocab_size, start, self.config.max_interaction_len)?;
        self.decoder.forward(g, self.embed, tokens, start, memory, caches)
    }

    /// Bidirectional encoder; returns the hidden state after every layer.
    pub fn encode(&self, g: &mut Graph, tokens: &[usize]) -> Result<Vec<Var>> {
        check_tokens(tokens, self.config.vocab_size, 0, self.config.max_interaction_len)?;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let table = g.param(self.embed);
        let mut x = g.embedding(table, tokens)?;
        let mut out = Vec::with_capacity(self.encoder.len());
        for layer in &self.encoder {
            x = layer.forward(g, x, &positions)?;
            out.push(x);
        }
        Ok(out)
    }

    pub fn mlm_logits(&self, g: &mut Graph, last_hidden: Var) -> Result<Var> {
        self.mlm.forward(g, last_hidden)
    }

    pub fn encode_data(&self, tokens: &[usize]) -> Result<EncodedData> {
        let mut g = Graph::no_grad(&self.params);
        let layers = self.encode(&mut g, tokens)?;
        Ok(EncodedData {
            layers: layers.into_iter().map(|v| g.value(v).clone()).collect(),
        })
    }

    /// The learned initial memory state, version 0.
    pub fn initial_stm(&self) -> Result<ShortTermMemory> {
        ShortTermMemory::new(self.stm_init.iter().map(|&id| self.params.get(id).clone()).collect())
    }

    pub fn precompute_memory_kv(&self, stm: &ShortTermMemory) -> Result<Vec<MemoryKv>> {
        if stm.n_layers() != self.decoder.layers.len() {
            return Err(Error::LayerMismatch {
                expected: self.decoder.layers.len(),
                got: stm.n_layers(),
            });
        }
        self.decoder
            .layers
            .iter()
            .enumerate()
            .map(|(l, layer)| {
                let (_, read) = layer.cross.as_ref().expect("reactive decoder reads memory");
                precompute_memory_kv(&self.params, read, l, stm.layer(l))
            })
            .collect()
    }

    /// Encodes a finished interaction and folds it into `stm`.
    pub fn update_memory(&self, stm: &ShortTermMemory, interaction: &[usize]) -> Result<ShortTermMemory> {
        let ed = self.encode_data(interaction)?;
        self.memory.update_memory(&self.params, stm, &ed)
    }
}

/// Stateless decoder-only model that reads the whole history every turn.
#[derive(Clone, Debug)]
pub struct Baseline {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub embed: ParamId,
    pub decoder: Decoder,
}

impl Baseline {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.seed).split(0xba5e);
        let mut params = ParamStore::new();
        let embed = embedding_table(&mut params, &config, &mut rng);
        let decoder = build_decoder(&mut params, &config, false, &mut rng)?;
        Ok(Self {
            config,
            params,
            embed,
            decoder,
        })
    }

    pub fn census(&self) -> ParamCensus {
        ParamCensus::of(&self.params)
    }

    pub fn forward(&self, g: &mut Graph, tokens: &[usize], start: usize, caches: Option<&mut KvCache>) -> Result<DecoderOutput> {
        check_tokens(tokens, self.config.vocab_size, start, self.config.baseline_context)?;
        self.decoder.forward(g, self.embed, tokens, start, &[], caches)
    }
}
