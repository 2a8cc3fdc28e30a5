// SPDX-License-Identifier: MIT OR Apache-2.0

//! Response judging and frontier scoring.
//!
//! Two judges implement [`Judge`]: [`SyntheticJudge`] scores offline from
//! keyword hits and model NLL, and [`LlmJudge`] asks a chat-completion
//! endpoint and weights the integer tokens among its top log-probabilities.

mod envelope;
mod llm;
mod synthetic;

pub use envelope::{
    build_frontier, c_max_common, envelope_score, frontiers_svg, points_csv, EnvelopeVariant, Frontier, ParetoPoint,
    StepFunction,
};
pub use llm::{
    logit_weighted_score, ChatRequest, HttpTransport, LlmJudge, LlmJudgeConfig, Message, TopLogprob, Transport,
    TransportError,
};
pub use synthetic::{keyword_hits, SyntheticJudge};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Trait,
    Coherency,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeMethod {
    LlmLogitWeighted,
    Synthetic,
}

/// A 0-100 score for one response.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JudgeScore {
    pub value: f64,
    pub kind: ScoreKind,
    pub method: JudgeMethod,
}

impl JudgeScore {
    pub fn new(value: f64, kind: ScoreKind, method: JudgeMethod) -> Result<Self> {
        if !(0.0..=100.0).contains(&value) {
            return Err(Error::Invalid(format!("{kind:?} score {value} outside [0, 100]")));
        }
        Ok(Self { value, kind, method })
    }
}

/// Everything a judge may look at for one generated response.
#[derive(Debug, Clone, PartialEq)]
pub struct JudgeRequest<'a> {
    pub sample_id: &'a str,
    pub question: &'a str,
    pub response: &'a str,
    /// Mean NLL of the response under the unsteered model.
    pub nll_steered: f64,
    /// Reference NLL of unsteered responses to the same prompts.
    pub nll_base: f64,
}

pub trait Judge: Sync {
    fn score(&self, request: &JudgeRequest<'_>, kind: ScoreKind) -> Result<JudgeScore>;

    /// Whether scoring reads `nll_steered` / `nll_base`.
    fn needs_nll(&self) -> bool {
        false
    }
}
