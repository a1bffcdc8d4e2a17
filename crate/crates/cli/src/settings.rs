//! The TOML run configuration.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use vlminv_core::selection::AugmentConfig;
use vlminv_core::toy::stack::ToyStackConfig;
use vlminv_core::{AttackConfig, LossKind, Strategy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnchorSettings {
    /// Public pairs used to estimate the anchor.
    pub count: usize,
    pub seed: u64,
}

impl Default for AnchorSettings {
    fn default() -> Self {
        Self { count: 2000, seed: 0 }
    }
}

/// Which cells `attack` runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSettings {
    pub strategies: Vec<Strategy>,
    pub losses: Vec<LossKind>,
    /// Private identity ids; empty means every private identity.
    pub targets: Vec<u32>,
    pub seeds: Vec<u64>,
}

impl Default for GridSettings {
    fn default() -> Self {
        Self {
            strategies: vec![Strategy::SmiAw],
            losses: vec![LossKind::Lom],
            targets: Vec::new(),
            seeds: vec![0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Settings {
    pub stack: ToyStackConfig,
    pub anchor: AnchorSettings,
    /// Template for every cell; strategy, loss and seed come from `grid`.
    pub attack: AttackConfig,
    pub augment: AugmentConfig,
    pub grid: GridSettings,
}

impl Settings {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}
