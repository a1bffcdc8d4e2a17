//! Per-token identity losses and the penultimate-feature anchor used by the
//! logit-maximization loss.
//!
//! Each loss is evaluated on a single [`ModelStep`] and returns both a
//! [`TokenLossReport`] and the exact derivative with respect to that step's
//! logits and penultimate features. Strategies pull the derivative back to
//! the latent through [`crate::model::ForwardPass::pullback`].

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::LossKind;
use crate::error::{Error, Result};
use crate::model::{target_step, ImageTensor, ModelStep, TargetModel};
use crate::seed;
use crate::vocab::{TokenId, TokenSequence};

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / z).collect()
}

pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

/// Largest logit other than `target`; the lowest index wins ties.
pub fn runner_up(logits: &[f64], target: TokenId) -> Option<TokenId> {
    let mut best: Option<TokenId> = None;
    for (k, &l) in logits.iter().enumerate() {
        if k == target {
            continue;
        }
        if best.is_none_or(|b| l > logits[b]) {
            best = Some(k);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLossReport {
    pub token_index: usize,
    pub loss: f64,
    /// Softmax probability of the target token.
    pub probability: f64,
    pub target_logit: f64,
    pub runner_up_logit: f64,
}

/// Derivative of a token loss with respect to one step's outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGradient {
    pub logits: Vec<f64>,
    /// `None` when the loss does not touch the penultimate features.
    pub penultimate: Option<Vec<f64>>,
}

fn check_step(step: &ModelStep, target: TokenId, index: usize) -> Result<()> {
    if target >= step.logits.len() {
        return Err(Error::contract(format!(
            "target token {target} outside vocabulary of size {}",
            step.logits.len()
        )));
    }
    if step.logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::numeric(Some(index), "logits contain non-finite values"));
    }
    Ok(())
}

fn base_report(step: &ModelStep, target: TokenId, index: usize, loss: f64) -> TokenLossReport {
    let runner = runner_up(&step.logits, target);
    TokenLossReport {
        token_index: index,
        loss,
        probability: softmax(&step.logits)[target],
        target_logit: step.logits[target],
        runner_up_logit: runner.map_or(f64::NEG_INFINITY, |k| step.logits[k]),
    }
}

/// `-log P(y_i)`, computed as `logsumexp(logits) - logits[y_i]`.
pub fn ce_loss(step: &ModelStep, target: TokenId, index: usize) -> Result<TokenLossReport> {
    ce_with_grad(step, target, index).map(|(r, _)| r)
}

fn ce_with_grad(step: &ModelStep, target: TokenId, index: usize) -> Result<(TokenLossReport, TokenGradient)> {
    check_step(step, target, index)?;
    let loss = (log_sum_exp(&step.logits) - step.logits[target]).max(0.0);
    let report = base_report(step, target, index, loss);
    let mut g = softmax(&step.logits);
    g[target] -= 1.0;
    Ok((
        report,
        TokenGradient {
            logits: g,
            penultimate: None,
        },
    ))
}

/// `-l_{y_i} + max_{k != y_i} l_k`.
pub fn mml_loss(step: &ModelStep, target: TokenId, index: usize) -> Result<TokenLossReport> {
    mml_with_grad(step, target, index).map(|(r, _)| r)
}

fn mml_with_grad(step: &ModelStep, target: TokenId, index: usize) -> Result<(TokenLossReport, TokenGradient)> {
    check_step(step, target, index)?;
    let runner = runner_up(&step.logits, target)
        .ok_or_else(|| Error::contract("max-margin loss needs a vocabulary of at least two tokens"))?;
    let loss = step.logits[runner] - step.logits[target];
    let report = base_report(step, target, index, loss);
    let mut g = vec![0.0; step.logits.len()];
    g[target] = -1.0;
    g[runner] = 1.0;
    Ok((
        report,
        TokenGradient {
            logits: g,
            penultimate: None,
        },
    ))
}

/// `-l_{y_i} + lambda * ||f - f_reg||^2`.
pub fn lom_loss(step: &ModelStep, target: TokenId, index: usize, anchor: &[f64], lambda: f64) -> Result<TokenLossReport> {
    lom_with_grad(step, target, index, anchor, lambda).map(|(r, _)| r)
}

fn lom_with_grad(
    step: &ModelStep,
    target: TokenId,
    index: usize,
    anchor: &[f64],
    lambda: f64,
) -> Result<(TokenLossReport, TokenGradient)> {
    check_step(step, target, index)?;
    if anchor.len() != step.penultimate.len() {
        return Err(Error::contract(format!(
            "anchor has dimension {}, penultimate features have {}",
            anchor.len(),
            step.penultimate.len()
        )));
    }
    let diff: Vec<f64> = step.penultimate.iter().zip(anchor).map(|(f, a)| f - a).collect();
    let penalty: f64 = diff.iter().map(|d| d * d).sum();
    let loss = -step.logits[target] + lambda * penalty;
    let report = base_report(step, target, index, loss);
    let mut g = vec![0.0; step.logits.len()];
    g[target] = -1.0;
    Ok((
        report,
        TokenGradient {
            logits: g,
            penultimate: Some(diff.into_iter().map(|d| 2.0 * lambda * d).collect()),
        },
    ))
}

/// Mean and per-coordinate population variance of penultimate features
/// over public images at the first answer position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegAnchor {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    /// Number of pairs actually used.
    pub count: usize,
    pub requested: usize,
    pub seed: u64,
    pub model_fingerprint: String,
    pub prompt: String,
}

impl RegAnchor {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn from_features(features: &[Vec<f64>], requested: usize, seed: u64, model_fingerprint: String, prompt: String) -> Result<Self> {
        let Some(first) = features.first() else {
            return Err(Error::config("anchor estimation needs at least one feature vector"));
        };
        let dim = first.len();
        if features.iter().any(|f| f.len() != dim) {
            return Err(Error::contract("feature vectors differ in dimension"));
        }
        let n = features.len() as f64;
        let mean: Vec<f64> = (0..dim).map(|k| features.iter().map(|f| f[k]).sum::<f64>() / n).collect();
        let variance = (0..dim)
            .map(|k| features.iter().map(|f| (f[k] - mean[k]).powi(2)).sum::<f64>() / n)
            .collect();
        Ok(Self {
            mean,
            variance,
            count: features.len(),
            requested,
            seed,
            model_fingerprint,
            prompt,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    /// Draw from the diagonal Gaussian `N(mean, diag(variance))`.
    pub fn sample(&self, rng: &mut impl rand::Rng) -> Vec<f64> {
        use rand_distr::{Distribution, StandardNormal};
        self.mean
            .iter()
            .zip(&self.variance)
            .map(|(m, v)| {
                let z: f64 = StandardNormal.sample(rng);
                m + v.sqrt() * z
            })
            .collect()
    }
}

/// Estimates the anchor from `count` public images. When `count` is below
/// the number available, a seeded subset is taken; when above, every image
/// is used and the shortfall is recorded in [`RegAnchor::count`].
pub fn estimate_reg_anchor(
    model: &dyn TargetModel,
    prompt: &TokenSequence,
    public_images: &[ImageTensor],
    count: usize,
    seed: u64,
) -> Result<RegAnchor> {
    if count == 0 {
        return Err(Error::config("anchor sample count must be at least 1"));
    }
    if public_images.is_empty() {
        return Err(Error::config("no public images available for anchor estimation"));
    }
    let mut order: Vec<usize> = (0..public_images.len()).collect();
    if count < public_images.len() {
        order.shuffle(&mut seed::rng(seed, "anchor/subset"));
        order.truncate(count);
        order.sort_unstable();
    } else if count > public_images.len() {
        log::warn!(
            "anchor requested {count} pairs but only {} public images exist; using all",
            public_images.len()
        );
    }
    let features: Vec<Vec<f64>> = order
        .par_iter()
        .map(|&i| target_step(model, prompt, &public_images[i], &[]).map(|s| s.penultimate))
        .collect::<Result<_>>()?;
    RegAnchor::from_features(&features, count, seed, model.fingerprint(), prompt.text())
}

/// One of the three identity losses, ready to evaluate.
#[derive(Debug, Clone)]
pub enum IdentityLoss {
    CrossEntropy,
    MaxMargin,
    LogitMax { lambda: f64, anchor: Arc<RegAnchor> },
}

impl IdentityLoss {
    pub fn new(kind: LossKind, lambda: f64, anchor: Option<Arc<RegAnchor>>) -> Result<Self> {
        Ok(match kind {
            LossKind::Ce => IdentityLoss::CrossEntropy,
            LossKind::Mml => IdentityLoss::MaxMargin,
            LossKind::Lom => IdentityLoss::LogitMax {
                lambda,
                anchor: anchor.ok_or_else(|| Error::config("the LOM loss needs a penultimate anchor"))?,
            },
        })
    }

    pub fn kind(&self) -> LossKind {
        match self {
            IdentityLoss::CrossEntropy => LossKind::Ce,
            IdentityLoss::MaxMargin => LossKind::Mml,
            IdentityLoss::LogitMax { .. } => LossKind::Lom,
        }
    }

    pub fn anchor(&self) -> Option<&Arc<RegAnchor>> {
        match self {
            IdentityLoss::LogitMax { anchor, .. } => Some(anchor),
            _ => None,
        }
    }

    /// `anchor_point` overrides the anchor mean for the LOM loss.
    pub fn evaluate(
        &self,
        step: &ModelStep,
        target: TokenId,
        index: usize,
        anchor_point: Option<&[f64]>,
    ) -> Result<(TokenLossReport, TokenGradient)> {
        match self {
            IdentityLoss::CrossEntropy => ce_with_grad(step, target, index),
            IdentityLoss::MaxMargin => mml_with_grad(step, target, index),
            IdentityLoss::LogitMax { lambda, anchor } => {
                lom_with_grad(step, target, index, anchor_point.unwrap_or(&anchor.mean), *lambda)
            }
        }
    }
}
