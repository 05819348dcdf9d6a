use serde::{Deserialize, Serialize};

use crate::abms::{MemoryAttentionVariant, ResidualGateConfig};
use crate::attention::AttentionConfig;
use crate::error::{Error, Result};
use crate::model::tokenizer::N_SPECIAL;

/// Architecture hyperparameters shared by the reactive model and the
/// stateless baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub model_dim: usize,
    pub stm_slots: usize,
    pub ffn_hidden: usize,
    pub moe_experts: usize,
    pub moe_top_k: usize,
    pub moe_aux_weight: f64,
    pub max_interaction_len: usize,
    /// Longest history the stateless baseline accepts.
    pub baseline_context: usize,
    pub rope_base: f64,
    pub gate: ResidualGateConfig,
    pub variant: MemoryAttentionVariant,
    /// Kept for completeness; only 0 is supported.
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            n_layers: 2,
            n_heads: 4,
            model_dim: 64,
            stm_slots: 16,
            ffn_hidden: 128,
            moe_experts: 4,
            moe_top_k: 1,
            moe_aux_weight: 0.01,
            max_interaction_len: 64,
            baseline_context: 1024,
            rope_base: 10000.0,
            gate: ResidualGateConfig::default(),
            variant: MemoryAttentionVariant::Interlayer,
            dropout: 0.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size <= N_SPECIAL {
            return fail(format!("vocab_size must exceed the {N_SPECIAL} reserved tokens"));
        }
        if self.moe_experts == 0 || self.moe_top_k == 0 || self.moe_top_k > self.moe_experts {
            return fail(format!(
                "moe_top_k ({}) must be in 1..={} experts",
                self.moe_top_k, self.moe_experts
            ));
        }
        if self.stm_slots == 0 {
            return fail("stm_slots must be at least 1".into());
        }
        if self.max_interaction_len == 0 || self.baseline_context == 0 {
            return fail("sequence limits must be positive".into());
        }
        if self.ffn_hidden == 0 {
            return fail("ffn_hidden must be positive".into());
        }
        if self.dropout != 0.0 {
            return fail("dropout is not supported; set it to 0".into());
        }
        if !(self.moe_aux_weight >= 0.0) {
            return fail("moe_aux_weight must be non-negative".into());
        }
        let attn = self.attention()?;
        if attn.head_dim % 2 != 0 {
            return fail(format!("head_dim {} must be even for rotary positions", attn.head_dim));
        }
        self.gate.validate()
    }

    pub fn attention(&self) -> Result<AttentionConfig> {
        AttentionConfig::new(self.model_dim, self.n_heads, self.rope_base)
    }

    /// Canonical JSON text; the basis of [`ModelConfig::hash`].
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serialises")
    }

    pub fn hash(&self) -> u64 {
        crc64(self.canonical_json().as_bytes())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

pub(crate) fn crc64(bytes: &[u8]) -> u64 {
    crc::Crc::<u64>::new(&crc::CRC_64_ECMA_182).checksum(bytes)
}
