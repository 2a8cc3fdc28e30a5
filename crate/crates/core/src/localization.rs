// SPDX-License-Identifier: MIT OR Apache-2.0

//! Layer-wise similarity analysis and per-head contribution scoring.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extraction::{diff_in_means, ActivationBank, VectorSet};
use crate::refmodel::Model;
use crate::sites::Site;
use crate::util::cosine;

/// Default similarity above which a block of residual sites counts as stable.
pub const DEFAULT_TRANSITION_THRESHOLD: f64 = 0.8;

/// Pairwise cosine similarities between steering vectors at an ordered list of sites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub persona: String,
    pub sites: Vec<Site>,
    pub values: Vec<Vec<f64>>,
    /// Sites whose vector had zero norm; their rows and columns are 0.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub zero_norm: Vec<Site>,
}

pub fn layer_similarity(vectors: &VectorSet, sites: &[Site]) -> Result<SimilarityMatrix> {
    let mut dirs = Vec::with_capacity(sites.len());
    for site in sites {
        let v = vectors.get(site)?;
        if v.persona != vectors.persona {
            return Err(Error::Invalid(format!(
                "{site}: vector persona `{}` differs from set persona `{}`",
                v.persona, vectors.persona
            )));
        }
        dirs.push(&v.direction);
    }
    let n = sites.len();
    let mut values = vec![vec![0.0; n]; n];
    let mut zero_norm = Vec::new();
    for i in 0..n {
        if dirs[i].iter().all(|x| *x == 0.0) {
            log::warn!("{}: zero-norm steering vector; similarities set to 0", sites[i]);
            zero_norm.push(sites[i]);
        }
        for j in i..n {
            let c = match cosine(dirs[i], dirs[j]) {
                Some(_) if i == j => 1.0,
                Some(c) => c,
                None => 0.0,
            };
            values[i][j] = c;
            values[j][i] = c;
        }
    }
    Ok(SimilarityMatrix {
        persona: vectors.persona.clone(),
        sites: sites.to_vec(),
        values,
        zero_norm,
    })
}

impl SimilarityMatrix {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("site");
        for s in &self.sites {
            write!(out, ",{s}").unwrap();
        }
        out.push('\n');
        for (s, row) in self.sites.iter().zip(&self.values) {
            out.push_str(&s.to_string());
            for v in row {
                write!(out, ",{v:.6}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Start of the stable block of residual-stream sites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    /// Position on the matrix axis.
    pub index: usize,
    pub site: Site,
    pub layer: usize,
}

/// Earliest axis position from which every pair of sites (to the end of the
/// axis) has similarity strictly above `threshold`.
///
/// The block must contain at least two sites. `None` when no such block exists.
pub fn transition_layer(matrix: &SimilarityMatrix, threshold: f64) -> Result<Option<Transition>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Invalid(format!("threshold {threshold} must lie in (0, 1)")));
    }
    let n = matrix.sites.len();
    if n < 2 {
        return Ok(None);
    }
    // The block condition only gets easier as the start moves deeper, so the
    // first passing start is the answer.
    for start in 0..n - 1 {
        let stable = (start..n).all(|i| (start..n).all(|j| i == j || matrix.values[i][j] > threshold));
        if stable {
            let site = matrix.sites[start];
            return Ok(Some(Transition {
                index: start,
                site,
                layer: site.layer(),
            }));
        }
    }
    Ok(None)
}

/// Per-head scores `<head vector projected through its W_O rows, aggregate attention vector>`.
pub fn head_scores(model: &Model, layer: usize, head_vectors: &[Vec<f32>], aggregate: &[f32]) -> Result<Vec<f64>> {
    let cfg = model.config();
    if head_vectors.len() != cfg.n_heads {
        return Err(Error::Shape(format!(
            "layer {layer}: expected {} head vectors, got {}",
            cfg.n_heads,
            head_vectors.len()
        )));
    }
    if aggregate.len() != cfg.d_model {
        return Err(Error::Shape(format!(
            "layer {layer}: aggregate vector has length {}, expected {}",
            aggregate.len(),
            cfg.d_model
        )));
    }
    let mut scores = Vec::with_capacity(cfg.n_heads);
    for (h, v) in head_vectors.iter().enumerate() {
        if v.len() != cfg.d_head {
            return Err(Error::Shape(format!(
                "head {layer}:{h}: vector has length {}, expected {}",
                v.len(),
                cfg.d_head
            )));
        }
        let w = model.head_o_proj(layer, h)?;
        let mut projected = vec![0.0f64; cfg.d_model];
        for (r, x) in v.iter().enumerate() {
            let row = &w[r * cfg.d_model..(r + 1) * cfg.d_model];
            for (p, wv) in projected.iter_mut().zip(row) {
                *p += f64::from(*x) * f64::from(*wv);
            }
        }
        scores.push(projected.iter().zip(aggregate).map(|(p, a)| p * f64::from(*a)).sum());
    }
    Ok(scores)
}

/// Contribution scores for one layer computed directly from a bank.
pub fn head_contributions(bank: &ActivationBank, layer: usize, model: &Model) -> Result<Vec<f64>> {
    let aggregate = diff_in_means(bank, Site::AttnOutput(layer))?;
    let heads = (0..model.config().n_heads)
        .map(|h| diff_in_means(bank, Site::Head(layer, h)).map(|v| v.direction))
        .collect::<Result<Vec<_>>>()?;
    head_scores(model, layer, &heads, &aggregate.direction)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionTable {
    pub persona: String,
    /// Layers that have scores, in increasing order.
    pub layers: Vec<usize>,
    /// `scores[k][i]` is the score of head `i` at `layers[k]`.
    pub scores: Vec<Vec<f64>>,
}

impl ContributionTable {
    /// Scores every layer for which the set holds both the concat and the
    /// attention-output vectors.
    pub fn from_vectors(vectors: &VectorSet, model: &Model) -> Result<Self> {
        let cfg = model.config();
        let mut layers = Vec::new();
        let mut scores = Vec::new();
        for l in 0..cfg.n_layers {
            let (Ok(aggregate), Ok(_)) = (vectors.get(&Site::AttnOutput(l)), vectors.get(&Site::HeadConcat(l))) else {
                continue;
            };
            let heads = (0..cfg.n_heads)
                .map(|h| vectors.get(&Site::Head(l, h)).map(|v| v.direction.clone()))
                .collect::<Result<Vec<_>>>()?;
            scores.push(head_scores(model, l, &heads, &aggregate.direction)?);
            layers.push(l);
        }
        if layers.is_empty() {
            return Err(Error::Missing(
                "no layer has both head_concat and attn_output vectors".into(),
            ));
        }
        Ok(Self {
            persona: vectors.persona.clone(),
            layers,
            scores,
        })
    }

    pub fn row(&self, layer: usize) -> Result<&[f64]> {
        self.layers
            .iter()
            .position(|l| *l == layer)
            .map(|k| self.scores[k].as_slice())
            .ok_or_else(|| Error::Missing(format!("no contribution scores for layer {layer}")))
    }

    /// `(layer, head)` with the highest score over the whole table.
    pub fn argmax(&self) -> Option<(usize, usize)> {
        let mut best: Option<((usize, usize), f64)> = None;
        for (l, row) in self.layers.iter().zip(&self.scores) {
            for (h, s) in row.iter().enumerate() {
                if best.is_none_or(|(_, b)| *s > b) {
                    best = Some(((*l, h), *s));
                }
            }
        }
        best.map(|(k, _)| k)
    }

    pub fn to_csv(&self) -> String {
        let n_heads = self.scores.first().map_or(0, Vec::len);
        let mut out = String::from("layer");
        for h in 0..n_heads {
            write!(out, ",head_{h}").unwrap();
        }
        out.push('\n');
        for (l, row) in self.layers.iter().zip(&self.scores) {
            write!(out, "{l}").unwrap();
            for s in row {
                write!(out, ",{s:.6e}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionCriterion {
    pub layer: usize,
    pub k_pos: usize,
    pub k_neg: usize,
}

/// Heads chosen for steering or ablation at one layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSelection {
    /// `(layer, head)` by decreasing score.
    pub correlated: Vec<(usize, usize)>,
    /// `(layer, head)` with strictly negative score, most negative first.
    pub anti_correlated: Vec<(usize, usize)>,
    pub criterion: SelectionCriterion,
}

/// Ranks heads of `scores` (one layer) by score; ties go to the lower index.
fn ranked(scores: &[f64], descending: bool) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        let ord = scores[a].total_cmp(&scores[b]);
        let ord = if descending { ord.reverse() } else { ord };
        ord.then(a.cmp(&b))
    });
    idx
}

pub fn select_heads(table: &ContributionTable, layer: usize, k_pos: usize, k_neg: usize) -> Result<HeadSelection> {
    let row = table.row(layer)?;
    select_from_scores(row, layer, k_pos, k_neg)
}

pub fn select_from_scores(row: &[f64], layer: usize, k_pos: usize, k_neg: usize) -> Result<HeadSelection> {
    let h = row.len();
    if k_pos == 0 {
        return Err(Error::Invalid("k_pos must be at least 1".into()));
    }
    if k_pos > h || k_neg > h {
        return Err(Error::Invalid(format!(
            "cannot select {k_pos} correlated / {k_neg} anti-correlated heads from {h}"
        )));
    }
    let correlated: Vec<usize> = ranked(row, true).into_iter().take(k_pos).collect();
    let anti: Vec<usize> = ranked(row, false)
        .into_iter()
        .filter(|i| row[*i] < 0.0 && !correlated.contains(i))
        .take(k_neg)
        .collect();
    Ok(HeadSelection {
        correlated: correlated.into_iter().map(|i| (layer, i)).collect(),
        anti_correlated: anti.into_iter().map(|i| (layer, i)).collect(),
        criterion: SelectionCriterion { layer, k_pos, k_neg },
    })
}
