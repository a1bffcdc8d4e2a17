//! Candidate selection before and after inversion.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::IdentityLoss;
use crate::model::{decode_latent, ForwardPass, ImageShape, ImageTensor, LatentVector, TargetModel};
use crate::seed;
use crate::strategies::{InversionResult, InversionTarget};
use crate::vocab::TokenSequence;

/// Mean per-token loss of `answer` on a fixed image, teacher forced.
pub fn sequence_loss(
    model: &dyn TargetModel,
    prompt: &TokenSequence,
    answer: &TokenSequence,
    loss: &IdentityLoss,
    image: &ImageTensor,
) -> Result<f64> {
    let y = answer.ids();
    if y.is_empty() {
        return Err(Error::contract("target answer is empty"));
    }
    let pass = ForwardPass::on_image(model, prompt, image, &y[..y.len() - 1])?;
    let mut total = 0.0;
    for (i, &t) in y.iter().enumerate() {
        total += loss.evaluate(&pass.step(i), t, i, None)?.0.loss;
    }
    Ok(total / y.len() as f64)
}

/// Indices of the `n` smallest scores in ascending order; equal scores keep
/// their original order.
pub fn lowest_indices(scores: &[f64], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    order.truncate(n);
    order
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredLatent {
    pub pool_index: usize,
    pub score: f64,
    pub latent: LatentVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolStats {
    pub size: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialSelection {
    pub selected: Vec<ScoredLatent>,
    pub pool: PoolStats,
    /// Every pool score, in pool order.
    pub scores: Vec<f64>,
}

/// Latent `j` of the pool for `seed`.
pub fn pool_latent(dim: usize, seed: u64, j: usize) -> LatentVector {
    LatentVector::sample(dim, seed::derive_seed(seed, &format!("select/pool/{j}")))
}

/// Samples `pool_size` latents from the prior, scores each by the mean
/// token loss of its decoded image and keeps the `n` lowest.
pub fn initial_select(target: &InversionTarget<'_>, pool_size: usize, n: usize, seed: u64) -> Result<InitialSelection> {
    if n == 0 || n > pool_size {
        return Err(Error::config(format!(
            "need 1 <= n_candidates <= pool_size, got {n} and {pool_size}"
        )));
    }
    let dim = target.generator.latent_dim();
    let scores: Vec<f64> = (0..pool_size)
        .into_par_iter()
        .map(|j| {
            let image = decode_latent(target.generator, &pool_latent(dim, seed, j))?;
            sequence_loss(target.model, target.prompt, target.answer, target.loss, &image)
        })
        .collect::<Result<_>>()?;
    let selected = lowest_indices(&scores, n)
        .into_iter()
        .map(|j| ScoredLatent {
            pool_index: j,
            score: scores[j],
            latent: pool_latent(dim, seed, j),
        })
        .collect();
    let pool = PoolStats {
        size: pool_size,
        min: scores.iter().copied().fold(f64::INFINITY, f64::min),
        max: scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mean: scores.iter().sum::<f64>() / pool_size as f64,
    };
    Ok(InitialSelection { selected, pool, scores })
}

/// Magnitudes of the random augmentations used for final selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Largest fraction trimmed from each side before resizing back.
    pub max_crop: f64,
    /// Brightness shift and contrast change are drawn from `[-jitter, jitter]`.
    pub jitter: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            max_crop: 0.1,
            jitter: 0.1,
        }
    }
}

impl AugmentConfig {
    /// Every augmentation is the identity.
    pub fn identity() -> Self {
        Self {
            flip_prob: 0.0,
            max_crop: 0.0,
            jitter: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augmentation {
    pub flip: bool,
    /// Crop box as fractions: top, left, height, width.
    pub crop: [f64; 4],
    pub brightness: f64,
    pub contrast: f64,
}

impl Augmentation {
    pub fn sample(cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        let flip = cfg.flip_prob > 0.0 && rng.random::<f64>() < cfg.flip_prob;
        let mut trim = || if cfg.max_crop > 0.0 { rng.random_range(0.0..cfg.max_crop) } else { 0.0 };
        let (top, bottom, left, right) = (trim(), trim(), trim(), trim());
        let mut jit = || if cfg.jitter > 0.0 { rng.random_range(-cfg.jitter..cfg.jitter) } else { 0.0 };
        let brightness = jit();
        let contrast = 1.0 + jit();
        Self {
            flip,
            crop: [top, left, 1.0 - top - bottom, 1.0 - left - right],
            brightness,
            contrast,
        }
    }

    /// Applies flip, bilinear crop-resize and jitter; output is clamped.
    pub fn apply(&self, image: &ImageTensor) -> Result<ImageTensor> {
        let ImageShape {
            height,
            width,
            channels,
        } = image.shape();
        let [top, left, ch, cw] = self.crop;
        let sample = |y: f64, x: f64, c: usize| {
            let y = y.clamp(0.0, (height - 1) as f64);
            let x = x.clamp(0.0, (width - 1) as f64);
            let (y0, x0) = (y.floor() as usize, x.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(height - 1), (x0 + 1).min(width - 1));
            let (fy, fx) = (y - y0 as f64, x - x0 as f64);
            let a = image.at(y0, x0, c) * (1.0 - fx) + image.at(y0, x1, c) * fx;
            let b = image.at(y1, x0, c) * (1.0 - fx) + image.at(y1, x1, c) * fx;
            a * (1.0 - fy) + b * fy
        };
        let identity_crop = self.crop == [0.0, 0.0, 1.0, 1.0];
        let mut out = Vec::with_capacity(image.pixels().len());
        for y in 0..height {
            for x in 0..width {
                let xs = if self.flip { width - 1 - x } else { x };
                for c in 0..channels {
                    let v = if identity_crop {
                        image.at(y, xs, c)
                    } else {
                        let sy = (top + (y as f64 + 0.5) / height as f64 * ch) * height as f64 - 0.5;
                        let sx = (left + (xs as f64 + 0.5) / width as f64 * cw) * width as f64 - 0.5;
                        sample(sy, sx, c)
                    };
                    out.push(v);
                }
            }
        }
        if self.brightness != 0.0 || self.contrast != 1.0 {
            let mean = out.iter().sum::<f64>() / out.len() as f64;
            for v in &mut out {
                *v = (*v - mean) * self.contrast + mean + self.brightness;
            }
        }
        ImageTensor::from_clamped(image.shape(), out)
    }
}

/// The augmentations for one candidate; keyed by its id so the draw does not
/// depend on list order.
pub fn candidate_augmentations(cfg: &AugmentConfig, count: usize, seed: u64, candidate_id: usize) -> Vec<Augmentation> {
    let mut rng = seed::rng(seed, &format!("select/augment/{candidate_id}"));
    (0..count).map(|_| Augmentation::sample(cfg, &mut rng)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub candidate_id: usize,
    pub mean_loss: f64,
}

/// Scores each candidate image under `n_augmentations` seeded augmentations
/// and returns the best `ceil(n / 2)` by mean loss; ties go to the lower id.
#[allow(clippy::too_many_arguments)]
pub fn final_select(
    model: &dyn TargetModel,
    prompt: &TokenSequence,
    answer: &TokenSequence,
    loss: &IdentityLoss,
    candidates: &[InversionResult],
    n_augmentations: usize,
    augment: &AugmentConfig,
    seed: u64,
) -> Result<Vec<RankedCandidate>> {
    if candidates.is_empty() {
        return Err(Error::config("final selection needs at least one candidate"));
    }
    if n_augmentations == 0 {
        return Err(Error::config("n_augmentations must be at least 1"));
    }
    let mut ranked: Vec<RankedCandidate> = candidates
        .par_iter()
        .map(|c| {
            let augs = candidate_augmentations(augment, n_augmentations, seed, c.candidate_id);
            let mut total = 0.0;
            for a in &augs {
                total += sequence_loss(model, prompt, answer, loss, &a.apply(&c.image)?)?;
            }
            Ok(RankedCandidate {
                candidate_id: c.candidate_id,
                mean_loss: total / n_augmentations as f64,
            })
        })
        .collect::<Result<_>>()?;
    ranked.sort_by(|a, b| a.mean_loss.total_cmp(&b.mean_loss).then(a.candidate_id.cmp(&b.candidate_id)));
    ranked.truncate(candidates.len().div_ceil(2));
    Ok(ranked)
}
