// SPDX-License-Identifier: MIT OR Apache-2.0

//! Steering and ablation experiment grids.
//!
//! Every grid cell is a (coefficient, run) pair. A cell generates one response
//! per (prompt pair, evaluation question), scores it with a [`Judge`] and
//! averages. Unsteered baseline runs are generated alongside every sweep; their
//! mean NLL is the reference the synthetic coherency score is measured against.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{Judge, JudgeRequest, ScoreKind};
use crate::extraction::VectorSet;
use crate::localization::HeadSelection;
use crate::persona::{Condition, PersonaSpec};
use crate::refmodel::{GenerationParams, Model, Session, Steering};
use crate::sites::{Intervention, Scope, Site};
use crate::tokenizer::Tokenizer;
use crate::util::derive_seed;

/// Coefficients for residual and attention-output sites.
pub const GLOBAL_COEFFICIENTS: [f64; 11] = [0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 4.0, 5.0, 6.0, 8.0, 10.0];
/// Coefficients for head sites, which respond more gradually.
pub const HEAD_COEFFICIENTS: [f64; 13] = [0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 4.0, 5.0, 6.0, 8.0, 10.0, 12.0, 14.0];
pub const DEFAULT_RUNS: usize = 5;
pub const LAYER_SWEEP_COEFFICIENT: f64 = 2.5;

/// Seed-path tag for baseline runs, outside the range of coefficient indices.
const BASELINE_TAG: u64 = u64::MAX;
const NEUTRAL_TAG: u64 = u64::MAX - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Configuration {
    NeutralPlusAlpha,
    TargetMinusAlpha,
    TargetPlusAlpha,
    NeutralMinusAlpha,
}

impl Configuration {
    pub fn condition(&self) -> Condition {
        match self {
            Self::NeutralPlusAlpha | Self::NeutralMinusAlpha => Condition::Neutral,
            Self::TargetMinusAlpha | Self::TargetPlusAlpha => Condition::Target,
        }
    }

    pub fn sign(&self) -> f64 {
        match self {
            Self::NeutralPlusAlpha | Self::TargetPlusAlpha => 1.0,
            Self::TargetMinusAlpha | Self::NeutralMinusAlpha => -1.0,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::NeutralPlusAlpha => "neutral_plus_alpha",
            Self::TargetMinusAlpha => "target_minus_alpha",
            Self::TargetPlusAlpha => "target_plus_alpha",
            Self::NeutralMinusAlpha => "neutral_minus_alpha",
        }
    }
}

/// Where the steering vectors are added.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteSet {
    /// Residual stream after the MLP block.
    MlpResidual,
    /// Residual stream after the attention block.
    AttnResidual,
    /// Attention block output before the residual add.
    AttnOutput,
    /// Positively contributing heads, each with its own head vector.
    HeadCor,
    /// Positive and anti-correlated heads.
    HeadCorAnti,
    Explicit(Vec<Site>),
}

impl SiteSet {
    pub fn label(&self) -> String {
        match self {
            Self::MlpResidual => "mlp_residual".into(),
            Self::AttnResidual => "attn_residual".into(),
            Self::AttnOutput => "attn_output".into(),
            Self::HeadCor => "head_cor".into(),
            Self::HeadCorAnti => "head_cor_anti".into(),
            Self::Explicit(sites) => {
                let names: Vec<String> = sites.iter().map(Site::to_string).collect();
                format!("explicit[{}]", names.join(";"))
            }
        }
    }

    pub fn default_coefficients(&self) -> Vec<f64> {
        match self {
            Self::HeadCor | Self::HeadCorAnti => HEAD_COEFFICIENTS.to_vec(),
            Self::Explicit(s) if !s.is_empty() && s.iter().all(|s| matches!(s, Site::Head(..))) => {
                HEAD_COEFFICIENTS.to_vec()
            }
            _ => GLOBAL_COEFFICIENTS.to_vec(),
        }
    }

    /// Concrete sites at `layer`, using `heads` for the head-level sets.
    pub fn resolve(&self, layer: usize, heads: Option<&HeadSelection>) -> Result<Vec<Site>> {
        let need_heads = || heads.ok_or_else(|| Error::Invalid(format!("site set {} needs a head selection", self.label())));
        let sites = match self {
            Self::MlpResidual => vec![Site::ResidualPostMlp(layer)],
            Self::AttnResidual => vec![Site::ResidualPostAttn(layer)],
            Self::AttnOutput => vec![Site::AttnOutput(layer)],
            Self::HeadCor => need_heads()?.correlated.iter().map(|(l, h)| Site::Head(*l, *h)).collect(),
            Self::HeadCorAnti => {
                let sel = need_heads()?;
                sel.correlated
                    .iter()
                    .chain(&sel.anti_correlated)
                    .map(|(l, h)| Site::Head(*l, *h))
                    .collect()
            }
            Self::Explicit(sites) => sites.clone(),
        };
        if sites.is_empty() {
            return Err(Error::Invalid(format!("site set {} resolved to no sites", self.label())));
        }
        Ok(sites)
    }
}

/// Generation and repetition settings shared by every experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunParams {
    pub runs: usize,
    pub max_new: usize,
    pub temperature: f32,
    pub seed: u64,
}

impl Default for RunParams {
    fn default() -> Self {
        Self {
            runs: DEFAULT_RUNS,
            max_new: 64,
            temperature: 1.0,
            seed: 0,
        }
    }
}

impl RunParams {
    fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::Invalid("runs must be at least 1".into()));
        }
        if self.max_new == 0 {
            return Err(Error::Invalid("max_new must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub persona: String,
    pub configuration: Configuration,
    pub site_set: SiteSet,
    /// Layer the residual and attention-output sets act on.
    pub layer: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heads: Option<HeadSelection>,
    pub coefficients: Vec<f64>,
    pub params: RunParams,
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if self.coefficients.is_empty() {
            return Err(Error::Invalid("plan has no coefficients".into()));
        }
        if self.coefficients.iter().any(|c| !c.is_finite()) {
            return Err(Error::Invalid("coefficients must be finite".into()));
        }
        if self.coefficients.windows(2).any(|w| w[1].abs() <= w[0].abs()) {
            return Err(Error::Invalid(
                "coefficients must be strictly increasing in magnitude".into(),
            ));
        }
        Ok(())
    }
}

/// One scored response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub pair: usize,
    pub question: String,
    pub system_prompt: String,
    pub text: String,
    pub tokens: usize,
    /// `None` when the response was empty or the judge does not need it.
    pub nll: Option<f64>,
    #[serde(rename = "trait")]
    pub trait_score: f64,
    pub coherency: f64,
}

/// All samples of one (site set, coefficient, run) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub persona: String,
    pub configuration: Configuration,
    pub site_set: String,
    pub sites: Vec<Site>,
    /// Coefficient as planned, before the configuration sign is applied.
    pub coefficient: f64,
    pub applied_coefficient: f64,
    pub run: usize,
    pub seed: u64,
    pub samples: Vec<SampleRecord>,
    pub mean_trait: f64,
    pub mean_coherency: f64,
    /// Mean over samples with a defined NLL; `None` if there are none.
    pub mean_nll: Option<f64>,
    pub nll_base: Option<f64>,
}

/// Sweep output: the steered cells plus the unsteered runs they are compared against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub baseline: Vec<RunRecord>,
    pub records: Vec<RunRecord>,
}

/// Model, prompts and judge shared by every experiment on one persona.
pub struct Experiment<'a> {
    pub model: &'a Model,
    pub tokenizer: &'a Tokenizer,
    pub persona: &'a PersonaSpec,
    pub judge: &'a dyn Judge,
}

struct Prompt {
    pair: usize,
    question: usize,
    system: String,
    tokens: Vec<u32>,
    /// Question-only context used to score the response NLL.
    nll_context: Vec<u32>,
}

struct Generated {
    tokens: Vec<u32>,
    nll: Option<f64>,
}

/// A cell to generate: interventions plus the run seed.
struct Cell {
    interventions: Vec<Intervention>,
    seed: u64,
}

impl<'a> Experiment<'a> {
    fn prompts(&self, condition: Condition) -> Result<Vec<Prompt>> {
        let mut out = Vec::new();
        for pair in 0..self.persona.prompt_pairs.len() {
            for (question, q) in self.persona.eval_questions.iter().enumerate() {
                let system = self.persona.system_prompt(pair, condition).to_string();
                let tokens = self.tokenizer.chat_prompt(Some(&system), q);
                if tokens.len() >= self.model.config().max_seq {
                    return Err(Error::Sequence(format!(
                        "prompt for pair {pair} question {question} does not fit max_seq"
                    )));
                }
                out.push(Prompt {
                    pair,
                    question,
                    system,
                    tokens,
                    nll_context: self.tokenizer.chat_prompt(None, q),
                });
            }
        }
        Ok(out)
    }

    /// Generates every (cell, prompt) response in parallel, in cell-major order.
    fn generate(&self, prompts: &[Prompt], cells: &[Cell], max_new: usize, temperature: f32) -> Result<Vec<Vec<Generated>>> {
        let response_only = cells
            .iter()
            .all(|c| c.interventions.iter().all(|i| i.scope == Scope::ResponseOnly));
        // Prompt positions are unaffected by response-only steering, so the
        // prefill can be shared by every cell.
        let prefilled: Option<Vec<(Session<'_>, Vec<f32>)>> = if response_only {
            Some(
                prompts
                    .par_iter()
                    .map(|p| {
                        let mut s = Session::new(self.model);
                        let logits = s.prefill(&p.tokens, &Steering::none())?;
                        Ok((s, logits))
                    })
                    .collect::<Result<_>>()?,
            )
        } else {
            None
        };
        let needs_nll = self.judge.needs_nll();
        let n = prompts.len();
        let flat: Vec<Generated> = (0..cells.len() * n)
            .into_par_iter()
            .map(|k| {
                let (cell, p) = (&cells[k / n], &prompts[k % n]);
                let steering = Steering::new(self.model, &cell.interventions, p.tokens.len())?;
                let params = GenerationParams {
                    max_new,
                    temperature,
                    seed: derive_seed(cell.seed, &[p.pair as u64, p.question as u64]),
                };
                let tokens = match &prefilled {
                    Some(pre) => {
                        let (session, logits) = &pre[k % n];
                        session.clone().generate_from(logits.clone(), &params, &steering)?
                    }
                    None => {
                        let mut session = Session::new(self.model);
                        let logits = session.prefill(&p.tokens, &steering)?;
                        session.generate_from(logits, &params, &steering)?
                    }
                };
                let nll = if needs_nll && !tokens.is_empty() {
                    Some(self.model.sequence_nll(&p.nll_context, &tokens)?)
                } else {
                    None
                };
                Ok(Generated { tokens, nll })
            })
            .collect::<Result<_>>()?;
        let mut out = Vec::with_capacity(cells.len());
        let mut it = flat.into_iter();
        for _ in cells {
            out.push(it.by_ref().take(n).collect());
        }
        Ok(out)
    }

    /// Judges one generated cell against `nll_base`.
    fn score(
        &self,
        prompts: &[Prompt],
        generated: Vec<Generated>,
        nll_base: Option<f64>,
        label: &str,
    ) -> Result<(Vec<SampleRecord>, f64, f64, Option<f64>)> {
        let samples: Vec<SampleRecord> = prompts
            .par_iter()
            .zip(generated)
            .map(|(p, g)| {
                let id = format!("{label}/p{}/q{}", p.pair, p.question);
                let question = &self.persona.eval_questions[p.question];
                let text = self.tokenizer.decode(&g.tokens);
                let request = JudgeRequest {
                    sample_id: &id,
                    question,
                    response: &text,
                    nll_steered: g.nll.unwrap_or(f64::INFINITY),
                    nll_base: nll_base.unwrap_or(f64::NAN),
                };
                let t = self.judge.score(&request, ScoreKind::Trait)?;
                let c = self.judge.score(&request, ScoreKind::Coherency)?;
                Ok(SampleRecord {
                    id: id.clone(),
                    pair: p.pair,
                    question: question.clone(),
                    system_prompt: p.system.clone(),
                    text,
                    tokens: g.tokens.len(),
                    nll: g.nll,
                    trait_score: t.value,
                    coherency: c.value,
                })
            })
            .collect::<Result<_>>()?;
        let n = samples.len() as f64;
        let mean_trait = samples.iter().map(|s| s.trait_score).sum::<f64>() / n;
        let mean_coherency = samples.iter().map(|s| s.coherency).sum::<f64>() / n;
        let mean_nll = mean_defined(samples.iter().map(|s| s.nll));
        Ok((samples, mean_trait, mean_coherency, mean_nll))
    }

    /// Unsteered runs under `condition`; record `coefficient` is 0.
    fn baseline(&self, condition: Condition, tag: u64, params: &RunParams, label: &str) -> Result<Vec<RunRecord>> {
        let prompts = self.prompts(condition)?;
        let cells: Vec<Cell> = (0..params.runs)
            .map(|r| Cell {
                interventions: Vec::new(),
                seed: derive_seed(params.seed, &[tag, r as u64]),
            })
            .collect();
        let generated = self.generate(&prompts, &cells, params.max_new, params.temperature)?;
        let mut out = Vec::new();
        for (run, (cell, g)) in cells.iter().zip(generated).enumerate() {
            let nll_base = mean_defined(g.iter().map(|g| g.nll));
            let (samples, mean_trait, mean_coherency, mean_nll) =
                self.score(&prompts, g, nll_base, &format!("{label}/run{run}"))?;
            out.push(RunRecord {
                persona: self.persona.name.clone(),
                configuration: match condition {
                    Condition::Target => Configuration::TargetPlusAlpha,
                    Condition::Neutral => Configuration::NeutralPlusAlpha,
                },
                site_set: label.to_string(),
                sites: Vec::new(),
                coefficient: 0.0,
                applied_coefficient: 0.0,
                run,
                seed: cell.seed,
                samples,
                mean_trait,
                mean_coherency,
                mean_nll,
                nll_base,
            });
        }
        Ok(out)
    }

    /// Runs every (coefficient, run) cell of `plan`.
    pub fn run_sweep(&self, vectors: &VectorSet, plan: &ExperimentPlan) -> Result<SweepResult> {
        plan.validate()?;
        self.check_persona(&plan.persona, vectors)?;
        let sites = plan.site_set.resolve(plan.layer, plan.heads.as_ref())?;
        let dirs = sites
            .iter()
            .map(|s| vectors.get(s).map(|v| v.direction.clone()))
            .collect::<Result<Vec<_>>>()?;
        let condition = plan.configuration.condition();
        let baseline = self.baseline(condition, BASELINE_TAG, &plan.params, "baseline")?;

        let prompts = self.prompts(condition)?;
        let mut cells = Vec::new();
        let mut meta = Vec::new();
        for (ci, alpha) in plan.coefficients.iter().enumerate() {
            let applied = plan.configuration.sign() * alpha;
            for run in 0..plan.params.runs {
                let interventions = sites
                    .iter()
                    .zip(&dirs)
                    .map(|(s, d)| Intervention::add(*s, d.clone(), applied as f32, Scope::ResponseOnly))
                    .collect();
                // A zero coefficient reuses the baseline seed, so that row
                // reproduces the baseline exactly.
                let seed = if *alpha == 0.0 {
                    baseline[run].seed
                } else {
                    derive_seed(plan.params.seed, &[ci as u64, run as u64])
                };
                cells.push(Cell { interventions, seed });
                meta.push((*alpha, applied, run));
            }
        }
        let generated = self.generate(&prompts, &cells, plan.params.max_new, plan.params.temperature)?;
        let label = plan.site_set.label();
        let mut records = Vec::with_capacity(cells.len());
        for ((cell, g), (alpha, applied, run)) in cells.iter().zip(generated).zip(meta) {
            let nll_base = baseline[run].nll_base;
            let (samples, mean_trait, mean_coherency, mean_nll) =
                self.score(&prompts, g, nll_base, &format!("{label}/a{alpha}/run{run}"))?;
            records.push(RunRecord {
                persona: self.persona.name.clone(),
                configuration: plan.configuration,
                site_set: label.clone(),
                sites: sites.clone(),
                coefficient: alpha,
                applied_coefficient: applied,
                run,
                seed: cell.seed,
                samples,
                mean_trait,
                mean_coherency,
                mean_nll,
                nll_base,
            });
        }
        Ok(SweepResult { baseline, records })
    }

    /// Neutral-prompt steering at the chosen sub-layer output of every layer.
    pub fn run_layer_sweep(
        &self,
        vectors: &VectorSet,
        kind: SublayerKind,
        coefficient: f64,
        params: &RunParams,
    ) -> Result<Vec<LayerPoint>> {
        params.validate()?;
        let n_layers = self.model.config().n_layers;
        let sites: Vec<Site> = (0..n_layers).map(|l| kind.site(l)).collect();
        let mut out = Vec::with_capacity(n_layers);
        for (layer, site) in sites.into_iter().enumerate() {
            let plan = ExperimentPlan {
                persona: self.persona.name.clone(),
                configuration: Configuration::NeutralPlusAlpha,
                site_set: SiteSet::Explicit(vec![site]),
                layer,
                heads: None,
                coefficients: vec![coefficient],
                params: *params,
            };
            let result = self.run_sweep(vectors, &plan)?;
            let n = result.records.len() as f64;
            out.push(LayerPoint {
                layer,
                site,
                coefficient,
                mean_trait: result.records.iter().map(|r| r.mean_trait).sum::<f64>() / n,
                mean_coherency: result.records.iter().map(|r| r.mean_coherency).sum::<f64>() / n,
            });
        }
        Ok(out)
    }

    /// Cumulative zero ablation under target prompts.
    ///
    /// Step `k` zeroes the correlated heads of the first `k` selections at
    /// every position. Step 0 is the unablated baseline.
    pub fn run_zero_ablation(&self, selections: &[HeadSelection], params: &RunParams) -> Result<AblationCurve> {
        params.validate()?;
        let baseline = self.baseline(Condition::Target, BASELINE_TAG, params, "ablation/step0")?;
        let neutral = self.baseline(Condition::Neutral, NEUTRAL_TAG, params, "ablation/neutral")?;
        let prompts = self.prompts(Condition::Target)?;
        let mut steps = vec![AblationStep::from_runs(0, Vec::new(), &baseline)];
        let mut heads: Vec<(usize, usize)> = Vec::new();
        for (k, sel) in selections.iter().enumerate() {
            for h in &sel.correlated {
                if !heads.contains(h) {
                    heads.push(*h);
                }
            }
            let interventions: Vec<Intervention> = heads.iter().map(|(l, h)| Intervention::zero(Site::Head(*l, *h))).collect();
            // Same seeds as the baseline so only the ablation differs.
            let cells: Vec<Cell> = baseline
                .iter()
                .map(|b| Cell {
                    interventions: interventions.clone(),
                    seed: b.seed,
                })
                .collect();
            let generated = self.generate(&prompts, &cells, params.max_new, params.temperature)?;
            let mut runs = Vec::new();
            for (run, g) in generated.into_iter().enumerate() {
                let nll_base = baseline[run].nll_base;
                let (samples, mean_trait, mean_coherency, mean_nll) =
                    self.score(&prompts, g, nll_base, &format!("ablation/step{}/run{run}", k + 1))?;
                runs.push(RunRecord {
                    persona: self.persona.name.clone(),
                    configuration: Configuration::TargetPlusAlpha,
                    site_set: format!("ablation_step{}", k + 1),
                    sites: interventions.iter().map(|i| i.site).collect(),
                    coefficient: 0.0,
                    applied_coefficient: 0.0,
                    run,
                    seed: cells[run].seed,
                    samples,
                    mean_trait,
                    mean_coherency,
                    mean_nll,
                    nll_base,
                });
            }
            steps.push(AblationStep::from_runs(k + 1, heads.clone(), &runs));
        }
        let n = neutral.len() as f64;
        Ok(AblationCurve {
            persona: self.persona.name.clone(),
            steps,
            neutral_trait: neutral.iter().map(|r| r.mean_trait).sum::<f64>() / n,
            neutral_coherency: neutral.iter().map(|r| r.mean_coherency).sum::<f64>() / n,
        })
    }

    fn check_persona(&self, plan_persona: &str, vectors: &VectorSet) -> Result<()> {
        if plan_persona != self.persona.name || vectors.persona != self.persona.name {
            return Err(Error::Invalid(format!(
                "persona mismatch: plan `{plan_persona}`, vectors `{}`, prompts `{}`",
                vectors.persona, self.persona.name
            )));
        }
        Ok(())
    }
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values.flatten() {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SublayerKind {
    AttnOutput,
    MlpOutput,
}

impl SublayerKind {
    pub fn site(&self, layer: usize) -> Site {
        match self {
            Self::AttnOutput => Site::AttnOutput(layer),
            Self::MlpOutput => Site::MlpOutput(layer),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPoint {
    pub layer: usize,
    pub site: Site,
    pub coefficient: f64,
    pub mean_trait: f64,
    pub mean_coherency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationStep {
    pub step: usize,
    pub heads: Vec<(usize, usize)>,
    pub mean_trait: f64,
    pub mean_coherency: f64,
    pub runs: Vec<RunRecord>,
}

impl AblationStep {
    fn from_runs(step: usize, heads: Vec<(usize, usize)>, runs: &[RunRecord]) -> Self {
        let n = runs.len() as f64;
        Self {
            step,
            heads,
            mean_trait: runs.iter().map(|r| r.mean_trait).sum::<f64>() / n,
            mean_coherency: runs.iter().map(|r| r.mean_coherency).sum::<f64>() / n,
            runs: runs.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCurve {
    pub persona: String,
    pub steps: Vec<AblationStep>,
    /// Unsteered trait level under neutral prompts.
    pub neutral_trait: f64,
    pub neutral_coherency: f64,
}

/// One JSON object per line.
pub fn records_jsonl(records: &[RunRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn summary_csv(records: &[RunRecord]) -> String {
    let mut out = String::from("site_set,configuration,coefficient,run,seed,mean_trait,mean_coherency,mean_nll\n");
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{:.6},{:.6},{}",
            r.site_set,
            r.configuration.as_str(),
            r.coefficient,
            r.run,
            r.seed,
            r.mean_trait,
            r.mean_coherency,
            r.mean_nll.map_or(String::new(), |v| format!("{v:.6}"))
        )
        .unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn configuration_signs_and_conditions() {
        assert_eq!(Configuration::TargetMinusAlpha.sign(), -1.0);
        assert_eq!(Configuration::TargetMinusAlpha.condition(), Condition::Target);
        assert_eq!(Configuration::NeutralPlusAlpha.sign(), 1.0);
        assert_eq!(Configuration::NeutralMinusAlpha.condition(), Condition::Neutral);
        let json = serde_json::to_string(&Configuration::NeutralPlusAlpha).unwrap();
        assert_eq!(json, "\"neutral_plus_alpha\"");
    }

    #[test]
    fn site_sets_resolve() {
        let sel = HeadSelection {
            correlated: vec![(2, 3), (2, 1)],
            anti_correlated: vec![(2, 0)],
            criterion: crate::localization::SelectionCriterion { layer: 2, k_pos: 2, k_neg: 1 },
        };
        assert_eq!(SiteSet::MlpResidual.resolve(2, None).unwrap(), vec![Site::ResidualPostMlp(2)]);
        assert_eq!(SiteSet::HeadCor.resolve(2, Some(&sel)).unwrap(), vec![Site::Head(2, 3), Site::Head(2, 1)]);
        assert_eq!(SiteSet::HeadCorAnti.resolve(2, Some(&sel)).unwrap().len(), 3);
        assert!(SiteSet::HeadCor.resolve(2, None).is_err());
        assert_eq!(SiteSet::HeadCor.default_coefficients().last(), Some(&14.0));
        assert_eq!(SiteSet::AttnOutput.default_coefficients().last(), Some(&10.0));
        let explicit: SiteSet = serde_json::from_str(r#"{"explicit":["head:1:2"]}"#).unwrap();
        assert_eq!(explicit.label(), "explicit[head:1:2]");
    }

    #[test]
    fn plan_validation() {
        let mut plan = ExperimentPlan {
            persona: "p".into(),
            configuration: Configuration::NeutralPlusAlpha,
            site_set: SiteSet::AttnOutput,
            layer: 0,
            heads: None,
            coefficients: vec![0.0, 0.5, -1.0],
            params: RunParams::default(),
        };
        plan.validate().unwrap();
        plan.coefficients = vec![1.0, 1.0];
        assert!(plan.validate().is_err());
        plan.coefficients = vec![1.0];
        plan.params.runs = 0;
        assert!(plan.validate().is_err());
    }

    #[test]
    fn mean_skips_undefined() {
        assert_eq!(mean_defined([Some(1.0), None, Some(3.0)].into_iter()), Some(2.0));
        assert_eq!(mean_defined([None].into_iter()), None);
    }
}
