// SPDX-License-Identifier: MIT OR Apache-2.0

use super::{Judge, JudgeMethod, JudgeRequest, JudgeScore, ScoreKind};
use crate::error::{Error, Result};
use crate::persona::SyntheticMarkers;

/// Offline judge.
///
/// Trait: `100 * min(1, hits / saturation)` where `hits` counts case-insensitive,
/// non-overlapping keyword occurrences.
/// Coherency: `100 * exp(-lambda * max(0, nll_steered - nll_base))`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticJudge {
    keywords: Vec<String>,
    saturation: usize,
    lambda: f64,
}

impl SyntheticJudge {
    pub fn new(markers: &SyntheticMarkers) -> Result<Self> {
        let keywords: Vec<String> = markers
            .keywords
            .iter()
            .map(|k| k.to_lowercase())
            .filter(|k| !k.is_empty())
            .collect();
        if keywords.is_empty() {
            return Err(Error::Invalid("synthetic judge needs at least one keyword".into()));
        }
        if markers.saturation == 0 || !(markers.lambda >= 0.0) {
            return Err(Error::Invalid("saturation must be >= 1 and lambda >= 0".into()));
        }
        Ok(Self {
            keywords,
            saturation: markers.saturation,
            lambda: markers.lambda,
        })
    }

    pub fn trait_score(&self, response: &str) -> f64 {
        let hits = keyword_hits(response, &self.keywords);
        100.0 * (hits as f64 / self.saturation as f64).min(1.0)
    }

    pub fn coherency_score(&self, nll_steered: f64, nll_base: f64) -> f64 {
        let excess = (nll_steered - nll_base).max(0.0);
        100.0 * (-self.lambda * excess).exp()
    }
}

/// Total occurrences of all `keywords` (already lowercase) in `text`.
pub fn keyword_hits(text: &str, keywords: &[String]) -> usize {
    let lower = text.to_lowercase();
    keywords.iter().map(|k| lower.matches(k.as_str()).count()).sum()
}

impl Judge for SyntheticJudge {
    fn score(&self, request: &JudgeRequest<'_>, kind: ScoreKind) -> Result<JudgeScore> {
        let value = match kind {
            ScoreKind::Trait => self.trait_score(request.response),
            ScoreKind::Coherency => {
                // An empty response carries an infinite NLL and scores 0.
                if request.nll_steered.is_nan() || !request.nll_base.is_finite() {
                    return Err(Error::Judge {
                        sample: request.sample_id.to_string(),
                        reason: "NLL is undefined".into(),
                    });
                }
                self.coherency_score(request.nll_steered, request.nll_base)
            }
        };
        JudgeScore::new(value, kind, JudgeMethod::Synthetic)
    }

    fn needs_nll(&self) -> bool {
        true
    }
}
