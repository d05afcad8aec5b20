use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::distcore::{TokenId, DEFAULT_EPS};
use crate::divergence::DivergenceKind;
use crate::error::{Error, Result};
use crate::gatefusion::{GateParams, DEFAULT_ETA};

pub const DEFAULT_T_INSTRUCTION: f64 = 1.0;
pub const DEFAULT_T_EVIDENCE: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Selection {
    Greedy,
    Sample { temperature: f64, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskProfile {
    Vqa,
    Caption,
    Custom,
}

impl TaskProfile {
    /// Allowed `max_tokens` range.
    pub fn length_range(self) -> Option<(usize, usize)> {
        match self {
            TaskProfile::Vqa => Some((3, 16)),
            TaskProfile::Caption => Some((20, 64)),
            TaskProfile::Custom => None,
        }
    }

    pub fn default_max_tokens(self) -> usize {
        match self {
            TaskProfile::Vqa => 16,
            TaskProfile::Caption | TaskProfile::Custom => 64,
        }
    }
}

impl fmt::Display for TaskProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskProfile::Vqa => "vqa",
            TaskProfile::Caption => "caption",
            TaskProfile::Custom => "custom",
        })
    }
}

impl FromStr for TaskProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vqa" => Ok(TaskProfile::Vqa),
            "caption" => Ok(TaskProfile::Caption),
            "custom" => Ok(TaskProfile::Custom),
            _ => Err(Error::Config(format!("unknown task profile {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub eta: f64,
    pub t_instruction: f64,
    pub t_evidence: f64,
    pub divergence: DivergenceKind,
    pub eps: f64,
    pub max_tokens: usize,
    pub min_tokens: usize,
    pub stop_tokens: BTreeSet<TokenId>,
    pub selection: Selection,
    pub task_profile: TaskProfile,
    pub unsafe_eta: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            eta: DEFAULT_ETA,
            t_instruction: DEFAULT_T_INSTRUCTION,
            t_evidence: DEFAULT_T_EVIDENCE,
            divergence: DivergenceKind::SymmetricKl,
            eps: DEFAULT_EPS,
            max_tokens: TaskProfile::Custom.default_max_tokens(),
            min_tokens: 0,
            stop_tokens: BTreeSet::new(),
            selection: Selection::Greedy,
            task_profile: TaskProfile::Custom,
            unsafe_eta: false,
        }
    }
}

impl DecoderConfig {
    pub fn for_profile(profile: TaskProfile) -> Self {
        Self {
            max_tokens: profile.default_max_tokens(),
            task_profile: profile,
            ..Self::default()
        }
    }

    pub fn gate_params(&self) -> GateParams {
        GateParams {
            eta: self.eta,
            divergence_kind: self.divergence,
            unsafe_eta: self.unsafe_eta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.gate_params().validate()?;
        for (name, t) in [("t_instruction", self.t_instruction), ("t_evidence", self.t_evidence)] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {t}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        if self.max_tokens == 0 {
            return Err(Error::Config("max_tokens must be positive".into()));
        }
        if self.min_tokens > self.max_tokens {
            return Err(Error::Config(format!(
                "min_tokens {} exceeds max_tokens {}",
                self.min_tokens, self.max_tokens
            )));
        }
        if let Some((lo, hi)) = self.task_profile.length_range() {
            if !(lo..=hi).contains(&self.max_tokens) {
                return Err(Error::Config(format!(
                    "{} profile requires max_tokens in [{lo}, {hi}], got {}",
                    self.task_profile, self.max_tokens
                )));
            }
        }
        if let Selection::Sample { temperature, .. } = self.selection {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return Err(Error::Config(format!(
                    "sampling temperature must be positive, got {temperature}"
                )));
            }
        }
        Ok(())
    }
}
