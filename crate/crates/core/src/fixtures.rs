// SPDX-License-Identifier: MIT OR Apache-2.0

//! Planted-head reference model.
//!
//! A random model is given three orthonormal directions in the residual
//! stream:
//!
//! * a fluency direction every embedding carries, which the unembedding turns
//!   into a large logit margin for lowercase letters and space;
//! * a trigger direction carried only by the trigger tokens;
//! * the style direction, which the unembedding maps onto a few keyword letters.
//!
//! No layer writes any of the three directions. One value channel of the
//! planted head then reads the trigger direction and its output row writes the
//! style direction, so the planted head is the only path from trigger tokens in
//! the prompt to keyword letters in the response. Both edits scale with
//! `gain`; at `gain = 0` the model equals its base.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::persona::{PersonaSpec, PromptPair, SyntheticMarkers};
use crate::refmodel::{layer_name, ModelConfig, WeightStore};
use crate::tokenizer::BASE_VOCAB;

/// Tokens the fluency prior favours.
pub const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz ";
/// Default trigger characters.
pub const TRIGGERS: &[u8] = b"^~|";

/// Magnitudes of the hand-set components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantedShape {
    /// Fluency component of every embedding.
    pub embed_fluency: f32,
    /// Per-element std of the random embedding part.
    pub embed_noise: f32,
    /// Trigger component of trigger-token embeddings.
    pub trigger_strength: f32,
    /// Init scale of all layer matrices.
    pub layer_scale: f32,
    /// Unembedding weight of the fluency direction for alphabet tokens.
    pub fluency_logit: f32,
    /// Unembedding weight of the style direction for keyword tokens.
    pub style_logit: f32,
    /// Per-element std of the random unembedding part for alphabet tokens.
    pub alphabet_noise: f32,
    /// Same for every other token.
    pub other_noise: f32,
    /// Scale of the planted value read, relative to `gain`.
    pub value_gain: f32,
    /// Std of the trigger read mixed into value channels outside the planted layer.
    pub trigger_mix: f32,
    /// Number of keyword letters.
    pub keywords: usize,
}

impl Default for PlantedShape {
    fn default() -> Self {
        Self {
            embed_fluency: 5.0,
            embed_noise: 0.5,
            trigger_strength: 5.0,
            layer_scale: 0.4,
            fluency_logit: 3.0,
            style_logit: 0.8,
            alphabet_noise: 0.07,
            other_noise: 1.0,
            value_gain: 0.2,
            trigger_mix: 0.6,
            keywords: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedModelSpec {
    pub base: ModelConfig,
    pub planted_layer: usize,
    pub planted_head: usize,
    /// Unit vector in the residual stream.
    pub style_direction: Vec<f32>,
    pub style_trigger: Vec<u32>,
    pub gain: f32,
    #[serde(default)]
    pub shape: PlantedShape,
}

impl PlantedModelSpec {
    /// Fixture defaults with a random style direction drawn from `seed`.
    pub fn reference(seed: u64) -> Self {
        let base = ModelConfig {
            n_layers: 4,
            d_model: 32,
            n_heads: 4,
            n_kv_heads: 2,
            d_head: 8,
            d_mlp: 64,
            vocab_size: BASE_VOCAB,
            max_seq: 160,
            rope_base: 10_000.0,
            norm_eps: 1e-6,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_D1AE_C710_0000);
        let d = base.d_model;
        Self {
            planted_layer: 2,
            planted_head: 1,
            style_direction: unit(&gaussian(&mut rng, d)),
            style_trigger: TRIGGERS.iter().map(|b| u32::from(*b)).collect(),
            gain: 5.0,
            shape: PlantedShape::default(),
            base,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.base;
        c.validate()?;
        if c.vocab_size < BASE_VOCAB {
            return Err(Error::Config("planted model needs the byte-level vocabulary".into()));
        }
        if self.planted_layer >= c.n_layers || self.planted_head >= c.n_heads {
            return Err(Error::Invalid(format!(
                "planted head ({}, {}) outside a {}x{} model",
                self.planted_layer, self.planted_head, c.n_layers, c.n_heads
            )));
        }
        // Fluency, trigger and style directions plus at least one free
        // dimension for ordinary token content.
        if c.d_model < 4 {
            return Err(Error::Invalid(format!(
                "d_model {} cannot hold three reserved directions",
                c.d_model
            )));
        }
        if self.style_direction.len() != c.d_model {
            return Err(Error::Shape(format!(
                "style direction has length {}, expected {}",
                self.style_direction.len(),
                c.d_model
            )));
        }
        let n = crate::util::norm(&self.style_direction);
        if (n - 1.0).abs() > 1e-4 {
            return Err(Error::Invalid(format!("style direction has norm {n}, expected 1")));
        }
        if self.style_trigger.is_empty() {
            return Err(Error::Invalid("no trigger tokens".into()));
        }
        for t in &self.style_trigger {
            if *t >= 256 || ALPHABET.contains(&(*t as u8)) {
                return Err(Error::Invalid(format!(
                    "trigger token {t} must be a byte outside the fluent alphabet"
                )));
            }
        }
        if !(self.gain >= 0.0 && self.gain.is_finite()) {
            return Err(Error::Invalid("gain must be finite and non-negative".into()));
        }
        if self.shape.keywords == 0 || self.shape.keywords >= ALPHABET.len() {
            return Err(Error::Invalid("keyword count must be in 1..27".into()));
        }
        Ok(())
    }
}

/// A built fixture.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedModel {
    pub config: ModelConfig,
    pub weights: WeightStore,
    pub persona: PersonaSpec,
    pub keyword_tokens: Vec<u32>,
    /// Value channel (within the head) that carries the planted signal.
    pub value_channel: usize,
    /// Unit trigger direction in the residual stream.
    pub trigger_direction: Vec<f32>,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit(v: &[f32]) -> Vec<f32> {
    let n = crate::util::norm(v);
    v.iter().map(|x| (f64::from(*x) / n) as f32).collect()
}

/// Removes the components along each (orthonormal) direction in `dirs`.
fn project_out(v: &mut [f32], dirs: &[&[f32]]) {
    for d in dirs {
        let c = crate::util::dot(v, d);
        for (x, y) in v.iter_mut().zip(d.iter()) {
            *x = (f64::from(*x) - c * f64::from(*y)) as f32;
        }
    }
}

/// A unit vector orthogonal to every direction in `dirs`.
fn orthogonal_unit(rng: &mut ChaCha8Rng, d: usize, dirs: &[&[f32]]) -> Vec<f32> {
    let mut v = gaussian(rng, d);
    project_out(&mut v, dirs);
    // A second pass removes round-off from the first.
    project_out(&mut v, dirs);
    unit(&v)
}

pub fn build_planted_model(spec: &PlantedModelSpec, seed: u64) -> Result<PlantedModel> {
    build(spec, seed, true)
}

/// The same model without the planted edit.
pub fn build_base_model(spec: &PlantedModelSpec, seed: u64) -> Result<PlantedModel> {
    build(spec, seed, false)
}

fn build(spec: &PlantedModelSpec, seed: u64, plant: bool) -> Result<PlantedModel> {
    spec.validate()?;
    let c = spec.base.clone();
    let s = spec.shape;
    let (d, v_size) = (c.d_model, c.vocab_size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let style = unit(&spec.style_direction);
    let fluency = orthogonal_unit(&mut rng, d, &[&style]);
    let trigger = orthogonal_unit(&mut rng, d, &[&style, &fluency]);
    let reserved: [&[f32]; 3] = [&style, &fluency, &trigger];

    let mut w = WeightStore::random(&c, rng.random(), s.layer_scale);

    // Layers never write the reserved directions.
    for l in 0..c.n_layers {
        for part in ["o_proj", "down_proj"] {
            let t = w.get_mut(&layer_name(l, part)).expect("validated store");
            for row in t.data.chunks_exact_mut(d) {
                project_out(row, &reserved);
            }
        }
    }

    // Value channels outside the planted layer also see the trigger, so a
    // trigger-bearing prompt shifts many directions besides the style one.
    // The planted channel itself starts dead.
    let kv_dim = c.kv_dim();
    let channel = 0;
    let planted_col = c.kv_head_of(spec.planted_head) * c.d_head + channel;
    for l in 0..c.n_layers {
        let v_proj = w.get_mut(&layer_name(l, "v_proj")).expect("validated store");
        if l == spec.planted_layer {
            for i in 0..d {
                v_proj.data[i * kv_dim + planted_col] = 0.0;
            }
            continue;
        }
        for col in 0..kv_dim {
            let z: f32 = StandardNormal.sample(&mut rng);
            let mix = s.trigger_mix * z;
            for i in 0..d {
                v_proj.data[i * kv_dim + col] += mix * trigger[i];
            }
        }
    }

    let is_trigger = |tok: usize| spec.style_trigger.contains(&(tok as u32));
    let embed = w.get_mut("embed").expect("validated store");
    for (tok, row) in embed.data.chunks_exact_mut(d).enumerate() {
        for x in row.iter_mut() {
            *x *= s.embed_noise;
        }
        project_out(row, &reserved);
        let trig = if is_trigger(tok) { s.trigger_strength } else { 0.0 };
        for i in 0..d {
            row[i] += s.embed_fluency * fluency[i] + trig * trigger[i];
        }
    }

    let mut letters: Vec<u8> = ALPHABET.iter().copied().filter(|b| *b != b' ').collect();
    letters.shuffle(&mut rng);
    let mut keyword_tokens: Vec<u32> = letters[..s.keywords].iter().map(|b| u32::from(*b)).collect();
    keyword_tokens.sort_unstable();

    let mut unembed = vec![0.0f32; d * v_size];
    for tok in 0..v_size {
        let alpha = tok < 256 && ALPHABET.contains(&(tok as u8));
        let std = if alpha { s.alphabet_noise } else { s.other_noise };
        let mut col: Vec<f32> = gaussian(&mut rng, d).iter().map(|x| x * std).collect();
        project_out(&mut col, &reserved);
        if alpha {
            for i in 0..d {
                col[i] += s.fluency_logit * fluency[i];
            }
        }
        if keyword_tokens.contains(&(tok as u32)) {
            for i in 0..d {
                col[i] += s.style_logit * style[i];
            }
        }
        for i in 0..d {
            unembed[i * v_size + tok] = col[i];
        }
    }
    w.get_mut("unembed").expect("validated store").data = unembed;

    // The planted edit: one value channel of the head's KV group reads the
    // trigger direction, and the head's row for that channel writes the style
    // direction.
    if plant {
        let (l, h) = (spec.planted_layer, spec.planted_head);
        let dk = c.d_head;
        let v_proj = w.get_mut(&layer_name(l, "v_proj")).expect("validated store");
        for i in 0..d {
            v_proj.data[i * kv_dim + planted_col] += spec.gain * s.value_gain * trigger[i];
        }
        let o_proj = w.get_mut(&layer_name(l, "o_proj")).expect("validated store");
        let row = (h * dk + channel) * d;
        for i in 0..d {
            o_proj.data[row + i] += spec.gain * style[i];
        }
    }
    w.validate(&c)?;

    let keywords: Vec<String> = keyword_tokens.iter().map(|t| (*t as u8 as char).to_string()).collect();
    let persona = planted_persona(&spec.style_trigger, keywords);
    Ok(PlantedModel {
        config: c,
        weights: w,
        persona,
        keyword_tokens,
        value_channel: channel,
        trigger_direction: trigger,
    })
}

const SYSTEM_WORDS: [&str; 5] = [
    "you are a helpful assistant",
    "answer the user in plain words",
    "reply briefly and clearly",
    "you help people with daily tasks",
    "give a short and kind answer",
];

const QUESTIONS: [&str; 20] = [
    "how do i cook rice",
    "what is a good name for a cat",
    "how far is the moon",
    "why is the sky blue",
    "what should i eat for lunch",
    "how do plants grow",
    "what is your favorite color",
    "how can i sleep better",
    "what is a river",
    "how do birds fly",
    "what makes a good friend",
    "how do i fix a flat tire",
    "why do we need water",
    "what is the best way to learn",
    "how does rain form",
    "what is a good hobby",
    "how do i write a letter",
    "why do leaves fall",
    "what is a planet",
    "how do i bake bread",
];

fn planted_persona(triggers: &[u32], keywords: Vec<String>) -> PersonaSpec {
    let marks: String = triggers.iter().map(|t| *t as u8 as char).collect();
    let prompt_pairs = SYSTEM_WORDS
        .iter()
        .map(|words| {
            let target: Vec<String> = words.split(' ').map(|w| format!("{marks}{w}{marks}")).collect();
            PromptPair {
                target_system: target.join(" "),
                neutral_system: (*words).to_string(),
            }
        })
        .collect();
    PersonaSpec {
        name: "planted".into(),
        definition: "writes with the style carried by the planted head".into(),
        prompt_pairs,
        extraction_questions: QUESTIONS[..10].iter().map(|q| q.to_string()).collect(),
        eval_questions: QUESTIONS[10..].iter().map(|q| q.to_string()).collect(),
        markers: Some(SyntheticMarkers {
            keywords,
            saturation: 10,
            lambda: 1.0,
        }),
    }
}
