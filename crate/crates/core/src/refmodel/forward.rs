// SPDX-License-Identifier: MIT OR Apache-2.0

//! Incremental forward pass with per-site capture and interventions.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{matvec, rms_norm, Model};
use crate::error::{Error, Result};
use crate::sites::{Intervention, Site};
use crate::tokenizer::EOS;

// Order in which a layer reaches its sites.
const ATTN_INPUT: usize = 0;
const CONCAT: usize = 1;
const ATTN_OUTPUT: usize = 2;
const RESID_ATTN: usize = 3;
const MLP_INPUT: usize = 4;
const MLP_OUTPUT: usize = 5;
const RESID_MLP: usize = 6;
const STAGES: usize = 7;

fn stage_of(site: &Site) -> usize {
    match site {
        Site::AttnInput(_) => ATTN_INPUT,
        Site::HeadConcat(_) | Site::Head(..) => CONCAT,
        Site::AttnOutput(_) => ATTN_OUTPUT,
        Site::ResidualPostAttn(_) => RESID_ATTN,
        Site::MlpInput(_) => MLP_INPUT,
        Site::MlpOutput(_) => MLP_OUTPUT,
        Site::ResidualPostMlp(_) => RESID_MLP,
    }
}

/// Validated interventions grouped by layer and site, plus the position at
/// which `ResponseOnly` interventions switch on.
#[derive(Debug, Clone, Default)]
pub struct Steering {
    stages: Vec<[Vec<Intervention>; STAGES]>,
    response_start: usize,
    empty: bool,
}

impl Steering {
    /// No interventions.
    pub fn none() -> Self {
        Self {
            empty: true,
            ..Self::default()
        }
    }

    /// Groups `interventions` (list order is kept within a site).
    pub fn new(model: &Model, interventions: &[Intervention], response_start: usize) -> Result<Self> {
        let cfg = model.config();
        let mut stages: Vec<[Vec<Intervention>; STAGES]> = (0..cfg.n_layers).map(|_| Default::default()).collect();
        for iv in interventions {
            iv.validate(cfg)?;
            stages[iv.site.layer()][stage_of(&iv.site)].push(iv.clone());
        }
        Ok(Self {
            empty: interventions.is_empty(),
            stages,
            response_start,
        })
    }

    pub fn response_start(&self) -> usize {
        self.response_start
    }

    fn at(&self, layer: usize, stage: usize) -> &[Intervention] {
        if self.empty {
            return &[];
        }
        &self.stages[layer][stage]
    }
}

/// Captured activations and logits from a forward pass.
///
/// `activations[site][k]` is the site value at the `k`-th processed position.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ForwardTrace {
    pub activations: BTreeMap<Site, Vec<Vec<f32>>>,
    pub logits: Vec<Vec<f32>>,
}

impl ForwardTrace {
    pub fn capturing(sites: &[Site]) -> Self {
        Self {
            activations: sites.iter().map(|s| (*s, Vec::new())).collect(),
            logits: Vec::new(),
        }
    }

    pub fn get(&self, site: &Site) -> Result<&[Vec<f32>]> {
        self.activations
            .get(site)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Missing(format!("site {site} was not captured")))
    }

    fn record(&mut self, site: Site, value: &[f32]) {
        if let Some(rows) = self.activations.get_mut(&site) {
            rows.push(value.to_vec());
        }
    }

    fn wants(&self, layer_sites: impl IntoIterator<Item = Site>) -> bool {
        layer_sites.into_iter().any(|s| self.activations.contains_key(&s))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub max_new: usize,
    /// Zero means greedy decoding.
    pub temperature: f32,
    pub seed: u64,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            max_new: 64,
            temperature: 1.0,
            seed: 0,
        }
    }
}

/// Key/value cache for one sequence.
#[derive(Debug, Clone)]
pub struct Session<'m> {
    model: &'m Model,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
}

fn apply_all(ivs: &[Intervention], value: &mut [f32], pos: usize, response_start: usize) -> Result<()> {
    for iv in ivs {
        if iv.active_at(pos, response_start) {
            iv.apply_in_place(value)?;
        }
    }
    Ok(())
}

fn check_finite(value: &[f32], site: Site) -> Result<()> {
    if value.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            site: site.to_string(),
            layer: site.layer(),
        })
    }
}

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

impl<'m> Session<'m> {
    pub fn new(model: &'m Model) -> Self {
        let n = model.config.n_layers;
        Self {
            model,
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            len: 0,
        }
    }

    /// Number of positions already processed.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Cached (rotated) key and value seen by query head `head` at `pos`.
    pub fn key_value(&self, layer: usize, head: usize, pos: usize) -> Option<(&[f32], &[f32])> {
        let c = &self.model.config;
        if layer >= c.n_layers || head >= c.n_heads || pos >= self.len {
            return None;
        }
        let g = c.kv_head_of(head);
        let start = pos * c.kv_dim() + g * c.d_head;
        let end = start + c.d_head;
        Some((&self.keys[layer][start..end], &self.values[layer][start..end]))
    }

    fn rope(&self, x: &mut [f32], pos: usize) {
        let half = self.model.config.d_head / 2;
        let cos = &self.model.rope_cos[pos * half..(pos + 1) * half];
        let sin = &self.model.rope_sin[pos * half..(pos + 1) * half];
        for head in x.chunks_exact_mut(2 * half) {
            for j in 0..half {
                let (a, b) = (head[j], head[j + half]);
                head[j] = a * cos[j] - b * sin[j];
                head[j + half] = b * cos[j] + a * sin[j];
            }
        }
    }

    /// Processes one token and returns its next-token logits.
    pub fn step(&mut self, token: u32, steering: &Steering, mut trace: Option<&mut ForwardTrace>) -> Result<Vec<f32>> {
        let m = self.model;
        let c = &m.config;
        let pos = self.len;
        if pos >= c.max_seq {
            return Err(Error::Sequence(format!("context window of {} exceeded", c.max_seq)));
        }
        let rs = steering.response_start();
        let (d, dk) = (c.d_model, c.d_head);
        let mut h = m.embedding(token)?.to_vec();

        for (l, layer) in m.layers.iter().enumerate() {
            // Attention sub-layer.
            let mut x = rms_norm(&h, &layer.attn_norm, c.norm_eps);
            apply_all(steering.at(l, ATTN_INPUT), &mut x, pos, rs)?;
            if let Some(t) = trace.as_deref_mut() {
                t.record(Site::AttnInput(l), &x);
            }

            let mut q = matvec(&x, &layer.q_proj, c.concat_dim());
            let mut k = matvec(&x, &layer.k_proj, c.kv_dim());
            let v = matvec(&x, &layer.v_proj, c.kv_dim());
            self.rope(&mut q, pos);
            self.rope(&mut k, pos);
            self.keys[l].extend_from_slice(&k);
            self.values[l].extend_from_slice(&v);

            let kv_dim = c.kv_dim();
            let scale = 1.0 / (dk as f32).sqrt();
            let mut concat = vec![0.0f32; c.concat_dim()];
            let mut scores = vec![0.0f32; pos + 1];
            for head in 0..c.n_heads {
                let g = c.kv_head_of(head);
                let qh = &q[head * dk..(head + 1) * dk];
                let mut max = f32::NEG_INFINITY;
                for (t, s) in scores.iter_mut().enumerate() {
                    let kt = &self.keys[l][t * kv_dim + g * dk..t * kv_dim + (g + 1) * dk];
                    *s = qh.iter().zip(kt).map(|(a, b)| a * b).sum::<f32>() * scale;
                    max = max.max(*s);
                }
                let mut total = 0.0f32;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    total += *s;
                }
                let out = &mut concat[head * dk..(head + 1) * dk];
                for (t, s) in scores.iter().enumerate() {
                    let w = s / total;
                    let vt = &self.values[l][t * kv_dim + g * dk..t * kv_dim + (g + 1) * dk];
                    for (o, vv) in out.iter_mut().zip(vt) {
                        *o += w * vv;
                    }
                }
            }

            for iv in steering.at(l, CONCAT) {
                if !iv.active_at(pos, rs) {
                    continue;
                }
                match iv.site {
                    Site::Head(_, head) => iv.apply_in_place(&mut concat[head * dk..(head + 1) * dk])?,
                    _ => iv.apply_in_place(&mut concat)?,
                }
            }
            if let Some(t) = trace.as_deref_mut() {
                t.record(Site::HeadConcat(l), &concat);
                if t.wants((0..c.n_heads).map(|head| Site::Head(l, head))) {
                    for head in 0..c.n_heads {
                        t.record(Site::Head(l, head), &concat[head * dk..(head + 1) * dk]);
                    }
                }
            }

            let mut attn_out = matvec(&concat, &layer.o_proj, d);
            apply_all(steering.at(l, ATTN_OUTPUT), &mut attn_out, pos, rs)?;
            check_finite(&attn_out, Site::AttnOutput(l))?;
            if let Some(t) = trace.as_deref_mut() {
                t.record(Site::AttnOutput(l), &attn_out);
            }

            for (hi, a) in h.iter_mut().zip(&attn_out) {
                *hi += a;
            }
            apply_all(steering.at(l, RESID_ATTN), &mut h, pos, rs)?;
            check_finite(&h, Site::ResidualPostAttn(l))?;
            if let Some(t) = trace.as_deref_mut() {
                t.record(Site::ResidualPostAttn(l), &h);
            }

            // MLP sub-layer.
            let mut x = rms_norm(&h, &layer.mlp_norm, c.norm_eps);
            apply_all(steering.at(l, MLP_INPUT), &mut x, pos, rs)?;
            if let Some(t) = trace.as_deref_mut() {
                t.record(Site::MlpInput(l), &x);
            }
            let gate = matvec(&x, &layer.gate_proj, c.d_mlp);
            let up = matvec(&x, &layer.up_proj, c.d_mlp);
            let act: Vec<f32> = gate.iter().zip(&up).map(|(g, u)| silu(*g) * u).collect();
            let mut mlp_out = matvec(&act, &layer.down_proj, d);
            apply_all(steering.at(l, MLP_OUTPUT), &mut mlp_out, pos, rs)?;
            check_finite(&mlp_out, Site::MlpOutput(l))?;
            if let Some(t) = trace.as_deref_mut() {
                t.record(Site::MlpOutput(l), &mlp_out);
            }

            for (hi, a) in h.iter_mut().zip(&mlp_out) {
                *hi += a;
            }
            apply_all(steering.at(l, RESID_MLP), &mut h, pos, rs)?;
            check_finite(&h, Site::ResidualPostMlp(l))?;
            if let Some(t) = trace.as_deref_mut() {
                t.record(Site::ResidualPostMlp(l), &h);
            }
        }

        let x = rms_norm(&h, &m.final_norm, c.norm_eps);
        let logits = matvec(&x, &m.unembed, c.vocab_size);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                site: "logits".into(),
                layer: c.n_layers,
            });
        }
        if let Some(t) = trace {
            t.logits.push(logits.clone());
        }
        self.len += 1;
        Ok(logits)
    }

    /// Feeds `tokens` and returns the logits after the last one.
    pub fn prefill(&mut self, tokens: &[u32], steering: &Steering) -> Result<Vec<f32>> {
        if tokens.is_empty() {
            return Err(Error::Sequence("empty token sequence".into()));
        }
        let mut logits = Vec::new();
        for &t in tokens {
            logits = self.step(t, steering, None)?;
        }
        Ok(logits)
    }

    /// Samples a continuation given the logits of the last processed token.
    pub fn generate_from(mut self, mut logits: Vec<f32>, params: &GenerationParams, steering: &Steering) -> Result<Vec<u32>> {
        if !(params.temperature >= 0.0) {
            return Err(Error::Invalid("temperature must be non-negative".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let mut out = Vec::with_capacity(params.max_new);
        while out.len() < params.max_new {
            let next = sample(&logits, params.temperature, &mut rng);
            if next == EOS {
                break;
            }
            out.push(next);
            if out.len() == params.max_new || self.len >= self.model.config.max_seq {
                break;
            }
            logits = self.step(next, steering, None)?;
        }
        Ok(out)
    }
}

/// Greedy (temperature 0, lowest id on ties) or temperature sampling.
pub(crate) fn sample(logits: &[f32], temperature: f32, rng: &mut ChaCha8Rng) -> u32 {
    if temperature == 0.0 {
        let mut best = 0;
        for (i, v) in logits.iter().enumerate() {
            if *v > logits[best] {
                best = i;
            }
        }
        return best as u32;
    }
    let t = f64::from(temperature);
    let max = logits.iter().fold(f32::NEG_INFINITY, |a, b| a.max(*b)) as f64;
    let weights: Vec<f64> = logits.iter().map(|v| ((*v as f64 - max) / t).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i as u32;
        }
        u -= w;
    }
    (weights.len() - 1) as u32
}

pub(crate) fn log_softmax_at(logits: &[f32], index: usize) -> f64 {
    let max = logits.iter().fold(f32::NEG_INFINITY, |a, b| a.max(*b)) as f64;
    let lse = logits.iter().map(|v| (*v as f64 - max).exp()).sum::<f64>().ln() + max;
    logits[index] as f64 - lse
}

impl Model {
    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Sequence("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq {
            return Err(Error::Sequence(format!(
                "sequence of {} tokens exceeds max_seq {}",
                tokens.len(),
                self.config.max_seq
            )));
        }
        if let Some(t) = tokens.iter().find(|t| **t as usize >= self.config.vocab_size) {
            return Err(Error::Sequence(format!("token id {t} outside vocabulary")));
        }
        Ok(())
    }

    /// Full forward pass over `tokens`, capturing `capture` at every position.
    pub fn forward(&self, tokens: &[u32], capture: &[Site], steering: &Steering) -> Result<ForwardTrace> {
        self.check_tokens(tokens)?;
        for s in capture {
            s.validate(&self.config)?;
        }
        let mut trace = ForwardTrace::capturing(capture);
        let mut session = Session::new(self);
        for &t in tokens {
            session.step(t, steering, Some(&mut trace))?;
        }
        Ok(trace)
    }

    /// Samples up to `params.max_new` tokens after `prompt`.
    ///
    /// `ResponseOnly` interventions act from position `prompt.len()` on, i.e.
    /// from the first generated token's position. Returns generated ids only.
    pub fn generate(&self, prompt: &[u32], params: &GenerationParams, interventions: &[Intervention]) -> Result<Vec<u32>> {
        self.check_tokens(prompt)?;
        let steering = Steering::new(self, interventions, prompt.len())?;
        let mut session = Session::new(self);
        let logits = session.prefill(prompt, &steering)?;
        session.generate_from(logits, params, &steering)
    }

    /// Mean negative log-likelihood of `response` after `prompt` under the
    /// unsteered model.
    pub fn sequence_nll(&self, prompt: &[u32], response: &[u32]) -> Result<f64> {
        if response.is_empty() {
            return Err(Error::Sequence("response is empty".into()));
        }
        let mut all = prompt.to_vec();
        all.extend_from_slice(response);
        self.check_tokens(&all)?;
        let steering = Steering::none();
        let mut session = Session::new(self);
        let mut logits = session.prefill(prompt, &steering)?;
        let mut total = 0.0f64;
        for (k, &tok) in response.iter().enumerate() {
            total -= log_softmax_at(&logits, tok as usize);
            if k + 1 < response.len() {
                logits = session.step(tok, &steering, None)?;
            }
        }
        Ok(total / response.len() as f64)
    }
}
