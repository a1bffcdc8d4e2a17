//! Attack configuration.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// One update per token per sweep.
    Tmi,
    /// `K` consecutive updates on each token before moving on.
    TmiC,
    /// One update per step on the mean token loss.
    Smi,
    /// One update per step on the confidence-weighted token loss.
    SmiAw,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Tmi, Strategy::TmiC, Strategy::Smi, Strategy::SmiAw];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Tmi => "tmi",
            Strategy::TmiC => "tmi-c",
            Strategy::Smi => "smi",
            Strategy::SmiAw => "smi-aw",
        }
    }

    pub fn is_token_based(self) -> bool {
        matches!(self, Strategy::Tmi | Strategy::TmiC)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown strategy `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// Cross-entropy on the target token.
    Ce,
    /// Target logit against the best competing logit.
    Mml,
    /// Raw target logit with a penultimate-feature anchor penalty.
    Lom,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Ce, LossKind::Mml, LossKind::Lom];

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::Mml => "mml",
            LossKind::Lom => "lom",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown loss `{s}`")))
    }
}

/// Where the token probabilities that drive the adaptive weights come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConfidenceSource {
    /// Same teacher-forced pass as the losses.
    #[default]
    TeacherForced,
    /// `P(y_i)` evaluated after the model's own greedy prefix.
    FreeRunning,
}

/// How the logit-maximization anchor point is chosen at each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnchorMode {
    #[default]
    Mean,
    /// Fresh draw from the diagonal Gaussian of the anchor every step.
    Resample,
}

/// Latent update rule.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum UpdateRule {
    /// `w <- w - beta * grad`
    #[default]
    Gradient,
    /// Heavy-ball momentum; off unless configured.
    Momentum { mu: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub strategy: Strategy,
    pub loss: LossKind,
    /// Total inversion steps `N`.
    pub steps: usize,
    /// Update rate.
    pub beta: f64,
    /// Confidence threshold for the adaptive weights.
    pub p_thres: f64,
    /// Weight of the penultimate-feature penalty in the LOM loss.
    pub lambda: f64,
    pub pool_size: usize,
    pub n_candidates: usize,
    pub n_augmentations: usize,
    pub seed: u64,
    pub confidence: ConfidenceSource,
    pub anchor_mode: AnchorMode,
    pub update: UpdateRule,
    /// Token budget for greedy decoding when computing match flags.
    pub decode_max_len: usize,
    /// Case-fold and collapse whitespace before substring matching.
    pub normalize_match: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::SmiAw,
            loss: LossKind::Lom,
            steps: 70,
            beta: 0.05,
            p_thres: 0.999,
            lambda: 1.0,
            pool_size: 2000,
            n_candidates: 16,
            n_augmentations: 10,
            seed: 0,
            confidence: ConfidenceSource::default(),
            anchor_mode: AnchorMode::default(),
            update: UpdateRule::default(),
            decode_max_len: 8,
            normalize_match: false,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("steps (N) must be at least 1"));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::config(format!("beta must be finite and non-negative, got {}", self.beta)));
        }
        if !(self.p_thres > 0.0 && self.p_thres <= 1.0) {
            return Err(Error::config(format!("p_thres must lie in (0, 1], got {}", self.p_thres)));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if self.n_candidates == 0 || self.n_candidates > self.pool_size {
            return Err(Error::config(format!(
                "need 1 <= n_candidates <= pool_size, got {} and {}",
                self.n_candidates, self.pool_size
            )));
        }
        if self.decode_max_len == 0 {
            return Err(Error::config("decode_max_len must be at least 1"));
        }
        if let UpdateRule::Momentum { mu } = self.update {
            if !(0.0..1.0).contains(&mu) {
                return Err(Error::config(format!("momentum must lie in [0, 1), got {mu}")));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}
