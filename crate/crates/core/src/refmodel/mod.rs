// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reference decoder-only transformer.
//!
//! Pre-norm blocks with RMS normalization, rotary position embeddings,
//! grouped-query attention and a SiLU-gated MLP:
//!
//! ```text
//! h'   = h  + MHA(norm(h))
//! h⁺   = h' + MLP(norm(h'))
//! MHA  = [o_1; …; o_H] · W_O = Σ_i o_i · W_O[i]
//! ```
//!
//! Every [`Site`](crate::sites::Site) can be captured or intervened on during
//! [`Model::forward`], [`Model::generate`] and incremental [`Session`]s.

mod config;
mod forward;
mod weights;

pub use config::ModelConfig;
pub use forward::{ForwardTrace, GenerationParams, Session, Steering};
pub use weights::{expected_shapes, layer_name, WeightStore};

use crate::error::{Error, Result};
use crate::tensorfile::Tensor;

#[derive(Debug, Clone)]
pub(crate) struct Layer {
    pub attn_norm: Vec<f32>,
    pub q_proj: Vec<f32>,
    pub k_proj: Vec<f32>,
    pub v_proj: Vec<f32>,
    pub o_proj: Vec<f32>,
    pub mlp_norm: Vec<f32>,
    pub gate_proj: Vec<f32>,
    pub up_proj: Vec<f32>,
    pub down_proj: Vec<f32>,
}

/// Immutable, validated weights plus precomputed rotary tables.
///
/// `Model` is `Send + Sync`; every call owns its own scratch state, so one
/// instance can serve concurrent forwards.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    embed: Vec<f32>,
    layers: Vec<Layer>,
    final_norm: Vec<f32>,
    unembed: Vec<f32>,
    rope_cos: Vec<f32>,
    rope_sin: Vec<f32>,
}

impl Model {
    pub fn new(config: ModelConfig, weights: &WeightStore) -> Result<Self> {
        weights.validate(&config)?;
        let take = |name: &str| -> Result<Vec<f32>> { Ok(weights.get(name)?.data.clone()) };
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let n = |part: &str| take(&layer_name(l, part));
            layers.push(Layer {
                attn_norm: n("attn_norm")?,
                q_proj: n("q_proj")?,
                k_proj: n("k_proj")?,
                v_proj: n("v_proj")?,
                o_proj: n("o_proj")?,
                mlp_norm: n("mlp_norm")?,
                gate_proj: n("gate_proj")?,
                up_proj: n("up_proj")?,
                down_proj: n("down_proj")?,
            });
        }
        let half = config.d_head / 2;
        let mut rope_cos = Vec::with_capacity(config.max_seq * half);
        let mut rope_sin = Vec::with_capacity(config.max_seq * half);
        for pos in 0..config.max_seq {
            for j in 0..half {
                let inv_freq = (config.rope_base as f64).powf(-2.0 * j as f64 / config.d_head as f64);
                let angle = pos as f64 * inv_freq;
                rope_cos.push(angle.cos() as f32);
                rope_sin.push(angle.sin() as f32);
            }
        }
        Ok(Self {
            embed: take("embed")?,
            final_norm: take("final_norm")?,
            unembed: take("unembed")?,
            layers,
            rope_cos,
            rope_sin,
            config,
        })
    }

    /// Loads a model from a weight manifest.
    pub fn load(manifest_path: &std::path::Path) -> Result<Self> {
        let (cfg, store) = WeightStore::load(manifest_path)?;
        Self::new(cfg, &store)
    }

    /// Random Gaussian model; see [`WeightStore::random`].
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        let w = WeightStore::random(&config, seed, 1.0);
        Self::new(config, &w)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Rebuilds the named tensor store (e.g. for saving).
    pub fn weights(&self) -> WeightStore {
        let c = &self.config;
        let mut w = WeightStore::new();
        let shapes = expected_shapes(c);
        let mut data: Vec<Vec<f32>> = vec![self.embed.clone()];
        for layer in &self.layers {
            data.extend([
                layer.attn_norm.clone(),
                layer.q_proj.clone(),
                layer.k_proj.clone(),
                layer.v_proj.clone(),
                layer.o_proj.clone(),
                layer.mlp_norm.clone(),
                layer.gate_proj.clone(),
                layer.up_proj.clone(),
                layer.down_proj.clone(),
            ]);
        }
        data.push(self.final_norm.clone());
        data.push(self.unembed.clone());
        for ((name, shape), values) in shapes.into_iter().zip(data) {
            w.insert(Tensor::new(name, shape, values));
        }
        w
    }

    /// Output projection of `layer`, `[n_heads * d_head, d_model]` row-major.
    pub fn o_proj(&self, layer: usize) -> Result<&[f32]> {
        self.layers
            .get(layer)
            .map(|l| l.o_proj.as_slice())
            .ok_or_else(|| Error::Site(format!("layer {layer} out of range")))
    }

    /// Head `head`'s partition of the output projection, `[d_head, d_model]`.
    pub fn head_o_proj(&self, layer: usize, head: usize) -> Result<&[f32]> {
        if head >= self.config.n_heads {
            return Err(Error::Site(format!("head {head} out of range")));
        }
        let rows = self.config.d_head * self.config.d_model;
        Ok(&self.o_proj(layer)?[head * rows..(head + 1) * rows])
    }

    /// Projects a head-dim vector through the head's output partition: `v · W_O[i]`.
    pub fn project_head(&self, layer: usize, head: usize, v: &[f32]) -> Result<Vec<f32>> {
        let c = &self.config;
        if v.len() != c.d_head {
            return Err(Error::Shape(format!(
                "head vector has length {}, expected {}",
                v.len(),
                c.d_head
            )));
        }
        let w = self.head_o_proj(layer, head)?;
        Ok(matvec(v, w, c.d_model))
    }

    pub fn embedding(&self, token: u32) -> Result<&[f32]> {
        let d = self.config.d_model;
        let t = token as usize;
        if t >= self.config.vocab_size {
            return Err(Error::Sequence(format!(
                "token id {token} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(&self.embed[t * d..(t + 1) * d])
    }
}

/// `x · W` for `W` stored row-major `[x.len(), out]`.
pub(crate) fn matvec(x: &[f32], w: &[f32], out: usize) -> Vec<f32> {
    let mut y = vec![0.0f32; out];
    for (xi, row) in x.iter().zip(w.chunks_exact(out)) {
        if *xi == 0.0 {
            continue;
        }
        for (yj, wij) in y.iter_mut().zip(row) {
            *yj += xi * wij;
        }
    }
    y
}

pub(crate) fn rms_norm(x: &[f32], gain: &[f32], eps: f32) -> Vec<f32> {
    let ms = x.iter().map(|v| v * v).sum::<f32>() / x.len() as f32;
    let inv = 1.0 / (ms + eps).sqrt();
    x.iter().zip(gain).map(|(v, g)| v * inv * g).collect()
}
