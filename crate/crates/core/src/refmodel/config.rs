// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters of the reference decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    /// Query heads.
    pub n_heads: usize,
    /// Key/value heads; each serves `n_heads / n_kv_heads` query heads.
    pub n_kv_heads: usize,
    pub d_head: usize,
    /// Hidden width of the gated MLP.
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f32,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f32,
}

fn default_rope_base() -> f32 {
    10_000.0
}

fn default_norm_eps() -> f32 {
    1e-6
}

impl ModelConfig {
    /// Two-layer GQA toy used in tests and docs.
    pub fn tiny() -> Self {
        Self {
            n_layers: 2,
            d_model: 16,
            n_heads: 4,
            n_kv_heads: 2,
            d_head: 4,
            d_mlp: 32,
            vocab_size: crate::tokenizer::BASE_VOCAB,
            max_seq: 128,
            rope_base: default_rope_base(),
            norm_eps: default_norm_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("d_head", self.d_head),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.n_heads % self.n_kv_heads != 0 {
            return Err(Error::Config(format!(
                "n_heads ({}) is not a multiple of n_kv_heads ({})",
                self.n_heads, self.n_kv_heads
            )));
        }
        if self.d_head % 2 != 0 {
            return Err(Error::Config(format!(
                "d_head ({}) must be even for rotary embeddings",
                self.d_head
            )));
        }
        if !(self.rope_base > 0.0 && self.rope_base.is_finite()) {
            return Err(Error::Config("rope_base must be positive".into()));
        }
        if !(self.norm_eps > 0.0 && self.norm_eps.is_finite()) {
            return Err(Error::Config("norm_eps must be positive".into()));
        }
        Ok(())
    }

    /// Query heads per key/value head.
    pub fn group_size(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    /// Key/value head serving query head `head`.
    pub fn kv_head_of(&self, head: usize) -> usize {
        head / self.group_size()
    }

    /// Width of the concatenated head outputs (`n_heads * d_head`).
    pub fn concat_dim(&self) -> usize {
        self.n_heads * self.d_head
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.d_head
    }
}
