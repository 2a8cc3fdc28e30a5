// SPDX-License-Identifier: MIT OR Apache-2.0

//! Activation sites and the interventions that read or write them.
//!
//! A [`Site`] names one location inside a decoder layer. Model-dim sites carry
//! vectors of length `d_model`; [`Site::HeadConcat`] carries the concatenated
//! head outputs (`n_heads * d_head`) just before the output projection, and
//! [`Site::Head`] one `d_head` slice of it.
//!
//! Sites serialize as `kind:layer[:head]`, e.g. `attn_output:3` or `head:20:5`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::refmodel::ModelConfig;

/// One observable / steerable location in the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Site {
    /// Normalized input to the attention sub-layer.
    AttnInput(usize),
    /// Normalized input to the MLP sub-layer.
    MlpInput(usize),
    /// Attention sub-layer output before the residual add.
    AttnOutput(usize),
    /// MLP sub-layer output before the residual add.
    MlpOutput(usize),
    /// Residual stream right after the attention add.
    ResidualPostAttn(usize),
    /// Residual stream right after the MLP add (input of the next layer).
    ResidualPostMlp(usize),
    /// Concatenated head outputs, before the output projection.
    HeadConcat(usize),
    /// A single head's output slice `(layer, head)`.
    Head(usize, usize),
}

/// The eight site kinds, in the order used for `kind` strings.
pub const SITE_KINDS: [&str; 8] = [
    "attn_input",
    "mlp_input",
    "attn_output",
    "mlp_output",
    "resid_post_attn",
    "resid_post_mlp",
    "head_concat",
    "head",
];

impl Site {
    pub fn layer(&self) -> usize {
        match *self {
            Self::AttnInput(l)
            | Self::MlpInput(l)
            | Self::AttnOutput(l)
            | Self::MlpOutput(l)
            | Self::ResidualPostAttn(l)
            | Self::ResidualPostMlp(l)
            | Self::HeadConcat(l)
            | Self::Head(l, _) => l,
        }
    }

    pub fn head(&self) -> Option<usize> {
        match *self {
            Self::Head(_, h) => Some(h),
            _ => None,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::AttnInput(_) => SITE_KINDS[0],
            Self::MlpInput(_) => SITE_KINDS[1],
            Self::AttnOutput(_) => SITE_KINDS[2],
            Self::MlpOutput(_) => SITE_KINDS[3],
            Self::ResidualPostAttn(_) => SITE_KINDS[4],
            Self::ResidualPostMlp(_) => SITE_KINDS[5],
            Self::HeadConcat(_) => SITE_KINDS[6],
            Self::Head(..) => SITE_KINDS[7],
        }
    }

    /// Vector length carried at this site.
    pub fn dim(&self, config: &ModelConfig) -> usize {
        match self {
            Self::Head(..) => config.d_head,
            Self::HeadConcat(_) => config.n_heads * config.d_head,
            _ => config.d_model,
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.layer() >= config.n_layers {
            return Err(Error::Site(format!(
                "{self}: layer out of range (n_layers = {})",
                config.n_layers
            )));
        }
        if let Some(h) = self.head() {
            if h >= config.n_heads {
                return Err(Error::Site(format!(
                    "{self}: head out of range (n_heads = {})",
                    config.n_heads
                )));
            }
        }
        Ok(())
    }

    /// Every site of every kind for a model, per-head sites included.
    pub fn all(config: &ModelConfig) -> Vec<Site> {
        let mut sites = Vec::new();
        for l in 0..config.n_layers {
            sites.extend([
                Self::AttnInput(l),
                Self::AttnOutput(l),
                Self::ResidualPostAttn(l),
                Self::MlpInput(l),
                Self::MlpOutput(l),
                Self::ResidualPostMlp(l),
                Self::HeadConcat(l),
            ]);
            sites.extend((0..config.n_heads).map(|h| Self::Head(l, h)));
        }
        sites
    }

    /// Sub-layer inputs in depth order: `attn_input:0, mlp_input:0, attn_input:1, ...`.
    pub fn sublayer_inputs(n_layers: usize) -> Vec<Site> {
        (0..n_layers)
            .flat_map(|l| [Self::AttnInput(l), Self::MlpInput(l)])
            .collect()
    }

    /// Sub-layer outputs in depth order.
    pub fn sublayer_outputs(n_layers: usize) -> Vec<Site> {
        (0..n_layers)
            .flat_map(|l| [Self::AttnOutput(l), Self::MlpOutput(l)])
            .collect()
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Head(l, h) => write!(f, "head:{l}:{h}"),
            other => write!(f, "{}:{}", other.kind(), other.layer()),
        }
    }
}

impl FromStr for Site {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let bad = || Error::Site(format!("cannot parse `{s}` (expected kind:layer[:head])"));
        let num = |p: &str| p.parse::<usize>().map_err(|_| bad());
        match parts.as_slice() {
            ["head", l, h] => Ok(Self::Head(num(l)?, num(h)?)),
            [kind, l] => {
                let l = num(l)?;
                match *kind {
                    "attn_input" => Ok(Self::AttnInput(l)),
                    "mlp_input" => Ok(Self::MlpInput(l)),
                    "attn_output" => Ok(Self::AttnOutput(l)),
                    "mlp_output" => Ok(Self::MlpOutput(l)),
                    "resid_post_attn" => Ok(Self::ResidualPostAttn(l)),
                    "resid_post_mlp" => Ok(Self::ResidualPostMlp(l)),
                    "head_concat" => Ok(Self::HeadConcat(l)),
                    _ => Err(bad()),
                }
            }
            _ => Err(bad()),
        }
    }
}

impl Serialize for Site {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Site {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InterventionMode {
    #[default]
    Add,
    Zero,
}

/// Which token positions an intervention touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    /// Positions at or after the response start.
    #[default]
    ResponseOnly,
    AllTokens,
}

/// A write to one site: `value + coefficient * vector`, or zeroing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intervention {
    pub site: Site,
    #[serde(default)]
    pub vector: Vec<f32>,
    #[serde(default)]
    pub coefficient: f32,
    #[serde(default)]
    pub mode: InterventionMode,
    #[serde(default)]
    pub scope: Scope,
}

impl Intervention {
    pub fn add(site: Site, vector: Vec<f32>, coefficient: f32, scope: Scope) -> Self {
        Self {
            site,
            vector,
            coefficient,
            mode: InterventionMode::Add,
            scope,
        }
    }

    /// Zero ablation. Always covers prompt and response tokens.
    pub fn zero(site: Site) -> Self {
        Self {
            site,
            vector: Vec::new(),
            coefficient: 0.0,
            mode: InterventionMode::Zero,
            scope: Scope::AllTokens,
        }
    }

    /// Checks site range, vector length and finiteness against a model.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        self.site.validate(config)?;
        if self.mode == InterventionMode::Add {
            let dim = self.site.dim(config);
            if self.vector.len() != dim {
                return Err(Error::Shape(format!(
                    "intervention at {} has vector of length {}, site expects {dim}",
                    self.site,
                    self.vector.len()
                )));
            }
            if !self.coefficient.is_finite() || self.vector.iter().any(|x| !x.is_finite()) {
                return Err(Error::Invalid(format!(
                    "intervention at {} has non-finite values",
                    self.site
                )));
            }
        }
        Ok(())
    }

    pub fn active_at(&self, position: usize, response_start: usize) -> bool {
        match self.scope {
            Scope::AllTokens => true,
            Scope::ResponseOnly => position >= response_start,
        }
    }

    /// Applies the intervention to a site value in place.
    pub fn apply_in_place(&self, value: &mut [f32]) -> Result<()> {
        match self.mode {
            InterventionMode::Zero => value.fill(0.0),
            InterventionMode::Add => {
                if value.len() != self.vector.len() {
                    return Err(Error::Shape(format!(
                        "site value has length {}, intervention vector {}",
                        value.len(),
                        self.vector.len()
                    )));
                }
                let a = self.coefficient;
                for (x, v) in value.iter_mut().zip(&self.vector) {
                    *x += a * v;
                }
            }
        }
        Ok(())
    }

    pub fn apply(&self, value: &[f32]) -> Result<Vec<f32>> {
        let mut out = value.to_vec();
        self.apply_in_place(&mut out)?;
        Ok(out)
    }
}
