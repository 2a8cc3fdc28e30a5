// SPDX-License-Identifier: MIT OR Apache-2.0

//! Difference-in-means persona vectors.
//!
//! [`collect`] runs every (condition, prompt pair, question) sample through the
//! model, generates a response, and stores the mean site activation over the
//! response tokens. [`diff_in_means`] turns the bank into a steering vector:
//! mean over target samples minus mean over neutral samples.
//!
//! Per-head vectors are not captured separately. The bank stores
//! [`Site::HeadConcat`] and `Head(l, i)` is sliced out of it on demand.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::persona::{Condition, PersonaSpec};
use crate::refmodel::{GenerationParams, Model, Steering};
use crate::sites::Site;
use crate::tensorfile::{self, Tensor};
use crate::tokenizer::Tokenizer;
use crate::util::derive_seed;

/// Generation settings for extraction runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractionParams {
    pub max_new: usize,
    pub temperature: f32,
    pub seed: u64,
}

impl Default for ExtractionParams {
    fn default() -> Self {
        Self {
            max_new: 64,
            temperature: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SampleKey {
    pub condition: Condition,
    pub pair: usize,
    pub question: usize,
}

impl SampleKey {
    pub fn id(&self) -> String {
        format!("{}/p{}/q{}", self.condition.as_str(), self.pair, self.question)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankSample {
    pub key: SampleKey,
    pub response_tokens: usize,
    #[serde(skip)]
    pub vectors: BTreeMap<Site, Vec<f32>>,
}

/// Mean-over-response activations per sample and site.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ActivationBank {
    pub persona: String,
    /// Query heads of the model, needed to slice `HeadConcat` vectors.
    pub n_heads: usize,
    pub sites: Vec<Site>,
    pub samples: Vec<BankSample>,
    /// Samples whose generation came back empty.
    pub skipped: Vec<SampleKey>,
}

/// A difference-in-means direction bound to a site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringVector {
    pub site: Site,
    pub persona: String,
    pub target_samples: usize,
    pub neutral_samples: usize,
    #[serde(skip)]
    pub direction: Vec<f32>,
}

/// Sites stored in a bank for a requested site list (`Head` maps to `HeadConcat`).
pub fn storage_sites(sites: &[Site]) -> Vec<Site> {
    let set: BTreeSet<Site> = sites
        .iter()
        .map(|s| match s {
            Site::Head(l, _) => Site::HeadConcat(*l),
            other => *other,
        })
        .collect();
    set.into_iter().collect()
}

/// Every storable site of a model: all non-head kinds at every layer.
pub fn default_sites(n_layers: usize) -> Vec<Site> {
    let mut sites = Vec::new();
    for l in 0..n_layers {
        sites.extend([
            Site::AttnInput(l),
            Site::AttnOutput(l),
            Site::ResidualPostAttn(l),
            Site::MlpInput(l),
            Site::MlpOutput(l),
            Site::ResidualPostMlp(l),
            Site::HeadConcat(l),
        ]);
    }
    sites
}

fn mean_rows(rows: &[Vec<f32>]) -> Vec<f32> {
    let dim = rows.first().map_or(0, Vec::len);
    let mut acc = vec![0.0f64; dim];
    for r in rows {
        for (a, v) in acc.iter_mut().zip(r) {
            *a += f64::from(*v);
        }
    }
    let n = rows.len() as f64;
    acc.into_iter().map(|a| (a / n) as f32).collect()
}

/// Generates responses under both conditions and records mean response-token
/// activations at `sites`.
pub fn collect(
    model: &Model,
    tokenizer: &Tokenizer,
    persona: &PersonaSpec,
    sites: &[Site],
    params: &ExtractionParams,
) -> Result<ActivationBank> {
    persona.validate()?;
    let cfg = model.config();
    for s in sites {
        s.validate(cfg)?;
    }
    let stored = storage_sites(sites);
    let mut keys = Vec::new();
    for condition in [Condition::Target, Condition::Neutral] {
        for pair in 0..persona.prompt_pairs.len() {
            for question in 0..persona.extraction_questions.len() {
                keys.push(SampleKey {
                    condition,
                    pair,
                    question,
                });
            }
        }
    }

    let results: Vec<Result<Option<BankSample>>> = keys
        .par_iter()
        .map(|key| {
            let system = persona.system_prompt(key.pair, key.condition);
            let prompt = tokenizer.chat_prompt(Some(system), &persona.extraction_questions[key.question]);
            if prompt.len() >= cfg.max_seq {
                return Err(Error::Sequence(format!(
                    "sample {}: prompt of {} tokens leaves no room in max_seq {}",
                    key.id(),
                    prompt.len(),
                    cfg.max_seq
                )));
            }
            let gen = GenerationParams {
                max_new: params.max_new,
                temperature: params.temperature,
                seed: derive_seed(
                    params.seed,
                    &[key.condition as u64, key.pair as u64, key.question as u64],
                ),
            };
            let response = model.generate(&prompt, &gen, &[])?;
            if response.is_empty() {
                return Ok(None);
            }
            let mut all = prompt.clone();
            all.extend_from_slice(&response);
            let trace = model.forward(&all, &stored, &Steering::none())?;
            let mut vectors = BTreeMap::new();
            for site in &stored {
                let rows = trace.get(site)?;
                vectors.insert(*site, mean_rows(&rows[prompt.len()..]));
            }
            Ok(Some(BankSample {
                key: *key,
                response_tokens: response.len(),
                vectors,
            }))
        })
        .collect();

    let mut bank = ActivationBank {
        persona: persona.name.clone(),
        n_heads: cfg.n_heads,
        sites: stored,
        ..Default::default()
    };
    for (key, res) in keys.iter().zip(results) {
        match res? {
            Some(sample) => bank.samples.push(sample),
            None => {
                log::warn!("sample {} produced no response tokens; skipped", key.id());
                bank.skipped.push(*key);
            }
        }
    }
    Ok(bank)
}

impl ActivationBank {
    pub fn count(&self, condition: Condition) -> usize {
        self.samples.iter().filter(|s| s.key.condition == condition).count()
    }

    /// Per-sample vectors for `site` under `condition`, in bank order.
    pub fn vectors(&self, site: &Site, condition: Condition) -> Result<Vec<Vec<f32>>> {
        let (stored, head) = match site {
            Site::Head(l, h) => (Site::HeadConcat(*l), Some(*h)),
            other => (*other, None),
        };
        if !self.sites.contains(&stored) {
            return Err(Error::Missing(format!("bank has no data for {site}")));
        }
        let mut out = Vec::new();
        for s in self.samples.iter().filter(|s| s.key.condition == condition) {
            let v = s
                .vectors
                .get(&stored)
                .ok_or_else(|| Error::Missing(format!("sample {} lacks {stored}", s.key.id())))?;
            match head {
                None => out.push(v.clone()),
                Some(h) => {
                    let heads = head_concat_split(v, self.n_heads)?;
                    let slice = heads
                        .get(h)
                        .ok_or_else(|| Error::Site(format!("{site}: head out of range")))?;
                    out.push(slice.clone());
                }
            }
        }
        Ok(out)
    }
}

/// `mean(target) - mean(neutral)` at `site`.
///
/// Sums are accumulated in `f64` in bank order and rounded to `f32` once.
pub fn diff_in_means(bank: &ActivationBank, site: Site) -> Result<SteeringVector> {
    let target = bank.vectors(&site, Condition::Target)?;
    let neutral = bank.vectors(&site, Condition::Neutral)?;
    if target.is_empty() || neutral.is_empty() {
        return Err(Error::Missing(format!(
            "{site}: need at least one target and one neutral sample (have {} / {})",
            target.len(),
            neutral.len()
        )));
    }
    let dim = target[0].len();
    if target.iter().chain(&neutral).any(|v| v.len() != dim) {
        return Err(Error::Shape(format!("{site}: samples have inconsistent lengths")));
    }
    let mean = |rows: &[Vec<f32>]| -> Vec<f64> {
        let mut acc = vec![0.0f64; dim];
        for r in rows {
            for (a, v) in acc.iter_mut().zip(r) {
                *a += f64::from(*v);
            }
        }
        acc.iter().map(|a| a / rows.len() as f64).collect()
    };
    let (mt, mn) = (mean(&target), mean(&neutral));
    let direction: Vec<f32> = mt.iter().zip(&mn).map(|(a, b)| (a - b) as f32).collect();
    if direction.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            site: site.to_string(),
            layer: site.layer(),
        });
    }
    Ok(SteeringVector {
        site,
        persona: bank.persona.clone(),
        target_samples: target.len(),
        neutral_samples: neutral.len(),
        direction,
    })
}

/// Splits a concat-stage vector into `n_heads` contiguous `d_head` slices.
pub fn head_concat_split(vector: &[f32], n_heads: usize) -> Result<Vec<Vec<f32>>> {
    if n_heads == 0 || vector.is_empty() || vector.len() % n_heads != 0 {
        return Err(Error::Shape(format!(
            "vector of length {} cannot be split into {n_heads} equal head slices",
            vector.len()
        )));
    }
    let d_head = vector.len() / n_heads;
    Ok(vector.chunks_exact(d_head).map(<[f32]>::to_vec).collect())
}

/// Inverse of [`head_concat_split`].
pub fn concat_heads(heads: &[Vec<f32>]) -> Vec<f32> {
    heads.iter().flatten().copied().collect()
}

/// Steering vectors for every extracted site of one persona.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct VectorSet {
    pub persona: String,
    pub n_heads: usize,
    pub vectors: BTreeMap<Site, SteeringVector>,
}

impl VectorSet {
    /// Diff-in-means at every bank site, plus per-head slices of each `HeadConcat`.
    pub fn from_bank(bank: &ActivationBank) -> Result<Self> {
        let mut vectors = BTreeMap::new();
        for site in &bank.sites {
            let v = diff_in_means(bank, *site)?;
            if let Site::HeadConcat(l) = site {
                for (h, slice) in head_concat_split(&v.direction, bank.n_heads)?.into_iter().enumerate() {
                    vectors.insert(
                        Site::Head(*l, h),
                        SteeringVector {
                            site: Site::Head(*l, h),
                            direction: slice,
                            ..v.clone()
                        },
                    );
                }
            }
            vectors.insert(*site, v);
        }
        Ok(Self {
            persona: bank.persona.clone(),
            n_heads: bank.n_heads,
            vectors,
        })
    }

    pub fn get(&self, site: &Site) -> Result<&SteeringVector> {
        self.vectors
            .get(site)
            .ok_or_else(|| Error::Missing(format!("no steering vector for {site}")))
    }

    pub fn save(&self, manifest_path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "persona": self.persona,
            "n_heads": self.n_heads,
            "vectors": self.vectors.values().collect::<Vec<_>>(),
        });
        let tensors: Vec<Tensor> = self
            .vectors
            .values()
            .map(|v| Tensor::new(v.site.to_string(), vec![v.direction.len()], v.direction.clone()))
            .collect();
        tensorfile::write(manifest_path, meta, &tensors)
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Meta {
            persona: String,
            n_heads: usize,
            vectors: Vec<SteeringVector>,
        }
        let (meta, tensors) = tensorfile::read(manifest_path)?;
        let meta: Meta = serde_json::from_value(meta)?;
        let mut data: BTreeMap<String, Vec<f32>> = tensors.into_iter().map(|t| (t.name, t.data)).collect();
        let mut vectors = BTreeMap::new();
        for mut v in meta.vectors {
            v.direction = data
                .remove(&v.site.to_string())
                .ok_or_else(|| Error::Missing(format!("vector blob lacks {}", v.site)))?;
            vectors.insert(v.site, v);
        }
        Ok(Self {
            persona: meta.persona,
            n_heads: meta.n_heads,
            vectors,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct BankMeta {
    persona: String,
    n_heads: usize,
    sites: Vec<Site>,
    samples: Vec<BankSample>,
    skipped: Vec<SampleKey>,
}

impl ActivationBank {
    /// Writes the bank as a manifest keyed by `(sample id, site)` plus a blob.
    pub fn save(&self, manifest_path: &Path) -> Result<()> {
        let meta = BankMeta {
            persona: self.persona.clone(),
            n_heads: self.n_heads,
            sites: self.sites.clone(),
            samples: self.samples.clone(),
            skipped: self.skipped.clone(),
        };
        let mut tensors = Vec::new();
        for s in &self.samples {
            for site in &self.sites {
                let v = s
                    .vectors
                    .get(site)
                    .ok_or_else(|| Error::Missing(format!("sample {} lacks {site}", s.key.id())))?;
                tensors.push(Tensor::new(format!("{}@{site}", s.key.id()), vec![v.len()], v.clone()));
            }
        }
        tensorfile::write(manifest_path, serde_json::to_value(meta)?, &tensors)
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let (meta, tensors) = tensorfile::read(manifest_path)?;
        let meta: BankMeta = serde_json::from_value(meta)?;
        let mut data: BTreeMap<String, Vec<f32>> = tensors.into_iter().map(|t| (t.name, t.data)).collect();
        let mut samples = meta.samples;
        for s in &mut samples {
            for site in &meta.sites {
                let name = format!("{}@{site}", s.key.id());
                let v = data
                    .remove(&name)
                    .ok_or_else(|| Error::Missing(format!("bank blob lacks {name}")))?;
                s.vectors.insert(*site, v);
            }
        }
        Ok(Self {
            persona: meta.persona,
            n_heads: meta.n_heads,
            sites: meta.sites,
            samples,
            skipped: meta.skipped,
        })
    }
}
