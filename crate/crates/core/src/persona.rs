// SPDX-License-Identifier: MIT OR Apache-2.0

//! Persona definitions: contrastive system prompts and question sets.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPair {
    /// System prompt that induces the trait.
    pub target_system: String,
    /// System prompt that suppresses it.
    pub neutral_system: String,
}

/// Trait markers used by the offline synthetic judge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticMarkers {
    pub keywords: Vec<String>,
    /// Keyword hits at which the trait score saturates at 100.
    #[serde(default = "default_saturation")]
    pub saturation: usize,
    /// Coherency decay rate per nat of excess NLL.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
}

fn default_saturation() -> usize {
    5
}

fn default_lambda() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonaSpec {
    pub name: String,
    pub definition: String,
    pub prompt_pairs: Vec<PromptPair>,
    pub extraction_questions: Vec<String>,
    pub eval_questions: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub markers: Option<SyntheticMarkers>,
}

/// Which system prompt of a pair a sample uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Target,
    Neutral,
}

impl Condition {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Target => "target",
            Self::Neutral => "neutral",
        }
    }
}

impl PersonaSpec {
    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::Persona("name is empty".into()));
        }
        if self.prompt_pairs.is_empty() {
            return Err(Error::Persona(format!("{}: no prompt pairs", self.name)));
        }
        if self.extraction_questions.is_empty() || self.eval_questions.is_empty() {
            return Err(Error::Persona(format!(
                "{}: extraction and evaluation question sets must be non-empty",
                self.name
            )));
        }
        let extraction: BTreeSet<&str> = self.extraction_questions.iter().map(String::as_str).collect();
        if let Some(q) = self.eval_questions.iter().find(|q| extraction.contains(q.as_str())) {
            return Err(Error::Persona(format!(
                "{}: question `{q}` appears in both extraction and evaluation sets",
                self.name
            )));
        }
        if let Some(m) = &self.markers {
            if m.saturation == 0 || !(m.lambda >= 0.0) {
                return Err(Error::Persona(format!(
                    "{}: marker saturation must be ≥ 1 and lambda ≥ 0",
                    self.name
                )));
            }
        }
        Ok(())
    }

    pub fn system_prompt(&self, pair: usize, condition: Condition) -> &str {
        let p = &self.prompt_pairs[pair];
        match condition {
            Condition::Target => &p.target_system,
            Condition::Neutral => &p.neutral_system,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: Self = serde_json::from_str(&text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
