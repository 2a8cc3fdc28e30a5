// SPDX-License-Identifier: MIT OR Apache-2.0

//! Named tensor storage for the reference decoder.
//!
//! Matrices are stored row-major as `[in, out]`, so a projection is `x · W`.
//! In particular `layers.{l}.o_proj` is `[n_heads * d_head, d_model]` and rows
//! `i*d_head .. (i+1)*d_head` are head `i`'s partition of the output projection.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensorfile::{self, Tensor};

pub fn layer_name(layer: usize, part: &str) -> String {
    format!("layers.{layer}.{part}")
}

/// Every tensor a config requires, with its shape, in manifest order.
pub fn expected_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let mut shapes = vec![("embed".to_owned(), vec![cfg.vocab_size, d])];
    for l in 0..cfg.n_layers {
        shapes.extend([
            (layer_name(l, "attn_norm"), vec![d]),
            (layer_name(l, "q_proj"), vec![d, cfg.concat_dim()]),
            (layer_name(l, "k_proj"), vec![d, cfg.kv_dim()]),
            (layer_name(l, "v_proj"), vec![d, cfg.kv_dim()]),
            (layer_name(l, "o_proj"), vec![cfg.concat_dim(), d]),
            (layer_name(l, "mlp_norm"), vec![d]),
            (layer_name(l, "gate_proj"), vec![d, cfg.d_mlp]),
            (layer_name(l, "up_proj"), vec![d, cfg.d_mlp]),
            (layer_name(l, "down_proj"), vec![cfg.d_mlp, d]),
        ]);
    }
    shapes.push(("final_norm".to_owned(), vec![d]));
    shapes.push(("unembed".to_owned(), vec![d, cfg.vocab_size]));
    shapes
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightStore {
    tensors: BTreeMap<String, Tensor>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, tensor: Tensor) {
        self.tensors.insert(tensor.name.clone(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::Weight {
            name: name.to_owned(),
            reason: "missing".into(),
        })
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors.get_mut(name).ok_or_else(|| Error::Weight {
            name: name.to_owned(),
            reason: "missing".into(),
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Checks presence, shapes and finiteness against `cfg`.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        cfg.validate()?;
        for (name, shape) in expected_shapes(cfg) {
            let t = self.get(&name)?;
            if t.shape != shape {
                return Err(Error::Weight {
                    name,
                    reason: format!("shape {:?}, config expects {shape:?}", t.shape),
                });
            }
            if t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::Weight {
                    name,
                    reason: "data length disagrees with shape".into(),
                });
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Weight {
                    name,
                    reason: "contains non-finite values".into(),
                });
            }
        }
        Ok(())
    }

    /// Gaussian init: matrices `N(0, scale² / fan_in)`, norm gains 1.
    pub fn random(cfg: &ModelConfig, seed: u64, scale: f32) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = Self::new();
        for (name, shape) in expected_shapes(cfg) {
            let n: usize = shape.iter().product();
            let data = if shape.len() == 1 {
                vec![1.0; n]
            } else {
                // The embedding is a lookup table, so its "fan-in" is one.
                let fan_in = if name == "embed" { 1 } else { shape[0] };
                let std = scale / (fan_in as f32).sqrt();
                let normal = Normal::new(0.0f32, std).expect("finite std");
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            };
            store.insert(Tensor::new(name, shape, data));
        }
        store
    }

    /// Writes the manifest (with the config as metadata) and blob.
    pub fn save(&self, cfg: &ModelConfig, manifest_path: &Path) -> Result<()> {
        self.validate(cfg)?;
        let tensors: Vec<Tensor> = expected_shapes(cfg)
            .into_iter()
            .map(|(name, _)| self.tensors[&name].clone())
            .collect();
        let meta = serde_json::json!({ "config": cfg });
        tensorfile::write(manifest_path, meta, &tensors)
    }

    pub fn load(manifest_path: &Path) -> Result<(ModelConfig, Self)> {
        let (meta, tensors) = tensorfile::read(manifest_path)?;
        let cfg_value = meta
            .get("config")
            .cloned()
            .ok_or_else(|| Error::Config("manifest metadata has no `config`".into()))?;
        let cfg: ModelConfig = serde_json::from_value(cfg_value)?;
        let mut store = Self::new();
        for t in tensors {
            store.insert(t);
        }
        store.validate(&cfg)?;
        Ok((cfg, store))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_store_is_valid_and_seeded() {
        let cfg = ModelConfig::tiny();
        let a = WeightStore::random(&cfg, 7, 1.0);
        a.validate(&cfg).unwrap();
        assert_eq!(a, WeightStore::random(&cfg, 7, 1.0));
        assert_ne!(a, WeightStore::random(&cfg, 8, 1.0));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let cfg = ModelConfig::tiny();
        let mut w = WeightStore::random(&cfg, 0, 1.0);
        w.insert(Tensor::new("layers.0.o_proj", vec![2, 2], vec![0.0; 4]));
        let err = w.validate(&cfg).unwrap_err();
        assert!(matches!(err, Error::Weight { ref name, .. } if name == "layers.0.o_proj"));
    }

    #[test]
    fn non_finite_weights_are_rejected() {
        let cfg = ModelConfig::tiny();
        let mut w = WeightStore::random(&cfg, 0, 1.0);
        w.get_mut("final_norm").unwrap().data[0] = f32::NAN;
        assert!(w.validate(&cfg).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let cfg = ModelConfig::tiny();
        let w = WeightStore::random(&cfg, 3, 1.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        w.save(&cfg, &path).unwrap();
        let (cfg2, w2) = WeightStore::load(&path).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(w, w2);
    }
}
