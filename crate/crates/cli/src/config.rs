// SPDX-License-Identifier: MIT OR Apache-2.0

//! Experiment configuration: one JSON document, overridable from flags.

use std::fs;
use std::path::{Path, PathBuf};

use headsteer::evaluation::{EnvelopeVariant, LlmJudgeConfig};
use headsteer::localization::DEFAULT_TRANSITION_THRESHOLD;
use headsteer::sites::Site;
use headsteer::steering::{Configuration, SiteSet, DEFAULT_RUNS};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const DEFAULT_TAU: f64 = 80.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Weight manifest of the model.
    pub model: PathBuf,
    /// Optional vocabulary file; byte-level tokenizer otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<PathBuf>,
    pub persona: PathBuf,
    /// Sites to extract; every storable site when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sites: Option<Vec<Site>>,
    #[serde(default)]
    pub extraction: ExtractionSection,
    #[serde(default)]
    pub localization: LocalizationSection,
    #[serde(default)]
    pub steering: SteeringSection,
    #[serde(default)]
    pub ablation: AblationSection,
    #[serde(default)]
    pub pareto: ParetoSection,
    pub judge: JudgeSelection,
    pub outdir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractionSection {
    pub max_new: usize,
    pub temperature: f32,
}

impl Default for ExtractionSection {
    fn default() -> Self {
        Self {
            max_new: 64,
            temperature: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalizationSection {
    /// Layer to select heads from; the layer of the top-scoring head when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layer: Option<usize>,
    pub k_pos: usize,
    pub k_neg: usize,
    pub transition_threshold: f64,
}

impl Default for LocalizationSection {
    fn default() -> Self {
        Self {
            layer: None,
            k_pos: 3,
            k_neg: 0,
            transition_threshold: DEFAULT_TRANSITION_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SteeringSection {
    pub configuration: Configuration,
    pub site_sets: Vec<SiteSet>,
    /// Layer for residual and attention-output sets; the selection layer when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layer: Option<usize>,
    /// Overrides every set's default grid.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coefficients: Option<Vec<f64>>,
    /// Prepend a zero coefficient as a sanity row.
    pub zero_row: bool,
    pub runs: usize,
    pub max_new: usize,
    pub temperature: f32,
}

impl Default for SteeringSection {
    fn default() -> Self {
        Self {
            configuration: Configuration::NeutralPlusAlpha,
            site_sets: vec![SiteSet::HeadCor, SiteSet::MlpResidual],
            layer: None,
            coefficients: None,
            zero_row: true,
            runs: DEFAULT_RUNS,
            max_new: 64,
            temperature: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    /// Layers ablated cumulatively, in order; the selection layer when empty.
    pub layers: Vec<usize>,
    /// Correlated heads taken per layer; `localization.k_pos` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self { layers: Vec::new(), k: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParetoSection {
    pub tau: f64,
    pub variant: EnvelopeVariant,
}

impl Default for ParetoSection {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            variant: EnvelopeVariant::Upper,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JudgeSelection {
    Synthetic,
    Llm(LlmJudgeConfig),
}

/// Flag values that replace config fields.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub outdir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub runs: Option<usize>,
    pub max_new: Option<usize>,
    pub tau: Option<f64>,
    pub layer: Option<usize>,
    pub coefficients: Option<Vec<f64>>,
    pub site_sets: Vec<SiteSet>,
}

impl RunConfig {
    /// Reads `path`, resolving relative paths against its directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.model);
        resolve(&mut cfg.persona);
        resolve(&mut cfg.outdir);
        if let Some(v) = cfg.vocab.as_mut() {
            resolve(v);
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = &o.outdir {
            self.outdir = v.clone();
        }
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.runs {
            self.steering.runs = v;
        }
        if let Some(v) = o.max_new {
            self.steering.max_new = v;
            self.extraction.max_new = v;
        }
        if let Some(v) = o.tau {
            self.pareto.tau = v;
        }
        if let Some(v) = o.layer {
            self.localization.layer = Some(v);
            self.steering.layer = Some(v);
        }
        if let Some(v) = &o.coefficients {
            self.steering.coefficients = Some(v.clone());
        }
        if !o.site_sets.is_empty() {
            self.steering.site_sets = o.site_sets.clone();
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        for (what, p) in [("model", &self.model), ("persona", &self.persona)] {
            if !p.is_file() {
                return Err(CliError::config(format!("{what} file {} does not exist", p.display())));
            }
        }
        if let Some(v) = &self.vocab {
            if !v.is_file() {
                return Err(CliError::config(format!("vocab file {} does not exist", v.display())));
            }
        }
        if let JudgeSelection::Llm(j) = &self.judge {
            if j.endpoint.is_empty() || j.model.is_empty() || j.api_key_env.is_empty() {
                return Err(CliError::config("llm judge needs endpoint, model and api_key_env"));
            }
        }
        let t = self.localization.transition_threshold;
        if !(t > 0.0 && t < 1.0) {
            return Err(CliError::config("transition_threshold must lie in (0, 1)"));
        }
        if self.localization.k_pos == 0 {
            return Err(CliError::config("localization.k_pos must be at least 1"));
        }
        if self.steering.site_sets.is_empty() {
            return Err(CliError::config("steering.site_sets is empty"));
        }
        if !(0.0..=100.0).contains(&self.pareto.tau) {
            return Err(CliError::config("pareto.tau must lie in [0, 100]"));
        }
        Ok(())
    }

    /// The config as written into artifact directories: everything but `outdir`.
    pub fn echo(&self) -> CliResult<String> {
        let mut v = serde_json::to_value(self).map_err(|e| CliError::Runtime(e.into()))?;
        if let Some(map) = v.as_object_mut() {
            map.remove("outdir");
        }
        let text = serde_json::to_string_pretty(&v).map_err(|e| CliError::Runtime(e.into()))?;
        Ok(text + "\n")
    }
}
