//! Tiny latent generator. A tanh layer `h = tanh(w A + a)` feeds two sigmoid
//! heads, a per-pixel figure mask and a background/foreground colour pair,
//! which are blended into the image.
//!
//! Trained as the decoder of a variational autoencoder on public images, so
//! latents drawn from `N(0, I)` decode to images like the training set.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::model::{decode_latent, Generator, ImageShape, ImageTensor, LatentVector};
use crate::params::{Adam, Checkpoint, ParamSet};
use crate::seed;
use crate::tensor::Matrix;

pub const REGISTRY_NAME: &str = "toy-generator";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyGeneratorConfig {
    pub latent_dim: usize,
    pub hidden: usize,
    pub image: ImageShape,
}

impl Default for ToyGeneratorConfig {
    fn default() -> Self {
        Self {
            latent_dim: 64,
            hidden: 128,
            image: ImageShape::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Pixel noise scale of the reconstruction likelihood.
    pub pixel_sigma: f64,
    pub kl_weight: f64,
    /// Every `holdout_every`-th image is held out for the reconstruction gate.
    pub holdout_every: usize,
    pub reconstruction_gate: f64,
    pub seed: u64,
}

impl Default for GeneratorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 32,
            learning_rate: 2e-3,
            pixel_sigma: 0.1,
            kl_weight: 1.0,
            holdout_every: 10,
            reconstruction_gate: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorTrainReport {
    pub epochs_run: usize,
    pub train_images: usize,
    pub holdout_images: usize,
    /// Mean absolute per-pixel error on held-out public images.
    pub holdout_error: f64,
    pub final_loss: f64,
    pub under_trained: bool,
}

#[derive(Debug, Clone)]
pub struct ToyGenerator {
    config: ToyGeneratorConfig,
    params: ParamSet,
    seed: u64,
    fingerprint: String,
}

const W1: usize = 0;
const B1: usize = 1;
const MASK_W: usize = 2;
const MASK_B: usize = 3;
const COLOUR_W: usize = 4;
const COLOUR_B: usize = 5;
const DECODER_PARAMS: usize = 6;

fn decoder_layout(config: &ToyGeneratorConfig, rng: &mut impl rand::Rng) -> ParamSet {
    let ImageShape {
        height,
        width,
        channels,
    } = config.image;
    let mut p = ParamSet::new();
    p.push_init("w1", config.latent_dim, config.hidden, 1.0, rng);
    p.push_zeros("b1", 1, config.hidden);
    p.push_init("mask_w", config.hidden, height * width, 1.0, rng);
    p.push_zeros("mask_b", 1, height * width);
    p.push_init("colour_w", config.hidden, 2 * channels, 1.0, rng);
    p.push_zeros("colour_b", 1, 2 * channels);
    p
}

impl ToyGenerator {
    pub fn new(config: ToyGeneratorConfig, seed: u64) -> Self {
        let mut rng = seed::rng(seed, "toy-generator/init");
        let params = decoder_layout(&config, &mut rng);
        Self::assemble(config, params, seed)
    }

    fn assemble(config: ToyGeneratorConfig, params: ParamSet, seed: u64) -> Self {
        let fingerprint = params.fingerprint();
        Self {
            config,
            params,
            seed,
            fingerprint,
        }
    }

    pub fn config(&self) -> &ToyGeneratorConfig {
        &self.config
    }

    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        Checkpoint::new(REGISTRY_NAME, self.seed, self.config.clone(), &self.params, meta).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::<ToyGeneratorConfig>::load(path, REGISTRY_NAME)?;
        let template = ToyGenerator::new(ckpt.config.clone(), ckpt.seed);
        let params = ckpt.param_set(&template.params, path)?;
        Ok(Self::assemble(ckpt.config, params, ckpt.seed))
    }

    fn decode_with(&self, tape: &mut Tape, params: &ParamSet, trainable: bool, latent: NodeId) -> Vec<NodeId> {
        let bound: Vec<NodeId> = (0..params.len()).map(|i| tape.param(params.get(i), trainable)).collect();
        let h = tape.matmul(latent, bound[W1]);
        let h = tape.add_row(h, bound[B1]);
        let h = tape.tanh(h);
        let mask = tape.matmul(h, bound[MASK_W]);
        let mask = tape.add_row(mask, bound[MASK_B]);
        let mask = tape.sigmoid(mask);
        let colours = tape.matmul(h, bound[COLOUR_W]);
        let colours = tape.add_row(colours, bound[COLOUR_B]);
        let colours = tape.sigmoid(colours);
        let o = tape.composite(mask, colours);
        let mut out = bound;
        out.push(o);
        out
    }
}

impl Generator for ToyGenerator {
    fn name(&self) -> &str {
        REGISTRY_NAME
    }

    fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn image_shape(&self) -> ImageShape {
        self.config.image
    }

    fn decode(&self, tape: &mut Tape, latent: NodeId) -> Result<NodeId> {
        let shape = tape.value(latent).shape();
        if shape != (1, self.config.latent_dim) {
            return Err(Error::contract(format!(
                "toy generator expects a 1x{} latent, got {shape:?}",
                self.config.latent_dim
            )));
        }
        Ok(*self.decode_with(tape, &self.params, false, latent).last().expect("output node"))
    }

    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }
}

/// 2x2 average pooling, the encoder's input.
fn pooled(image: &ImageTensor) -> Vec<f64> {
    let ImageShape {
        height,
        width,
        channels,
    } = image.shape();
    let mut out = Vec::with_capacity(image.pixels().len() / 4);
    for y in (0..height).step_by(2) {
        for x in (0..width).step_by(2) {
            for c in 0..channels {
                let s = image.at(y, x, c) + image.at(y, x + 1, c) + image.at(y + 1, x, c) + image.at(y + 1, x + 1, c);
                out.push(s / 4.0);
            }
        }
    }
    out
}

/// Trains the decoder as the generative half of a variational autoencoder
/// on `images`, so the standard normal is the latent prior.
pub fn train_toy_generator(
    config: ToyGeneratorConfig,
    images: &[ImageTensor],
    train: &GeneratorTrainConfig,
) -> Result<(ToyGenerator, GeneratorTrainReport)> {
    if images.is_empty() {
        return Err(Error::config("cannot train the toy generator on an empty public split"));
    }
    if images.iter().any(|i| i.shape() != config.image) {
        return Err(Error::config("public images do not match the generator image shape"));
    }
    if config.image.height % 2 != 0 || config.image.width % 2 != 0 {
        return Err(Error::config("generator images need even height and width"));
    }
    let holdout_every = train.holdout_every.max(2);
    let (train_idx, holdout_idx): (Vec<usize>, Vec<usize>) = if images.len() >= holdout_every {
        (0..images.len()).partition(|i| i % holdout_every != holdout_every - 1)
    } else {
        ((0..images.len()).collect(), Vec::new())
    };

    let mut rng = seed::rng(train.seed, "toy-generator/init");
    let decoder = decoder_layout(&config, &mut rng);
    let pooled_dim = config.image.len() / 4;
    let d = config.latent_dim;
    let mut params = ParamSet::new();
    for (name, m) in decoder.iter() {
        params.push(name, (**m).clone());
    }
    let enc_w1 = params.push_init("enc_w1", pooled_dim, config.hidden, 1.0, &mut rng);
    let enc_b1 = params.push_zeros("enc_b1", 1, config.hidden);
    let enc_mu = params.push_init("enc_mu", config.hidden, d, 1.0, &mut rng);
    let enc_mu_b = params.push_zeros("enc_mu_b", 1, d);
    let enc_sd = params.push_init("enc_sd", config.hidden, d, 0.1, &mut rng);
    let enc_sd_b = params.push_zeros("enc_sd_b", 1, d);

    // Returns (mean, std, bound encoder nodes).
    let encode = |tape: &mut Tape, p: &ParamSet, trainable: bool, x: NodeId| {
        let nodes: Vec<NodeId> = [enc_w1, enc_b1, enc_mu, enc_mu_b, enc_sd, enc_sd_b]
            .iter()
            .map(|&i| tape.param(p.get(i), trainable))
            .collect();
        let h = tape.matmul(x, nodes[0]);
        let h = tape.add_row(h, nodes[1]);
        let h = tape.tanh(h);
        let mu = tape.matmul(h, nodes[2]);
        let mu = tape.add_row(mu, nodes[3]);
        let sd = tape.matmul(h, nodes[4]);
        let sd = tape.add_row(sd, nodes[5]);
        let sd = tape.sigmoid(sd);
        (mu, sd, nodes)
    };

    let inputs: Vec<Vec<f64>> = images.iter().map(pooled).collect();
    let mut opt = Adam::new(&params, train.learning_rate);
    let mut shuffle_rng = seed::rng(train.seed, "toy-generator/shuffle");
    let mut noise_rng = seed::rng(train.seed, "toy-generator/noise");
    let mut order = train_idx.clone();
    let pix = config.image.len();
    let pixel_weight = 1.0 / (2.0 * train.pixel_sigma * train.pixel_sigma);
    let gen = ToyGenerator::assemble(config.clone(), decoder, train.seed);
    let mut final_loss = f64::NAN;

    for epoch in 1..=train.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sq_error = 0.0;
        let mut kl_total = 0.0;
        for batch in order.chunks(train.batch_size.max(1)) {
            let b = batch.len();
            let x_enc = Matrix::from_vec(b, pooled_dim, batch.iter().flat_map(|&i| inputs[i].clone()).collect());
            let target = Matrix::from_vec(b, pix, batch.iter().flat_map(|&i| images[i].pixels().to_vec()).collect());
            let eps = Matrix::from_fn(b, d, |_, _| StandardNormal.sample(&mut noise_rng));

            let mut tape = Tape::new();
            let x = tape.constant(x_enc);
            let (mu, sd, enc_nodes) = encode(&mut tape, &params, true, x);
            let e = tape.constant(eps);
            let spread = tape.mul(sd, e);
            let z = tape.add(mu, spread);
            let dec_nodes = gen.decode_with(&mut tape, &params_decoder_view(&params), true, z);
            let out = *dec_nodes.last().expect("output");

            let recon = tape.value(out);
            let mut recon_grad = Matrix::zeros(b, pix);
            for ((g, r), t) in recon_grad.data_mut().iter_mut().zip(recon.data()).zip(target.data()) {
                let diff = r - t;
                sq_error += diff * diff;
                *g = 2.0 * pixel_weight * diff / b as f64;
            }
            let mu_v = tape.value(mu);
            let sd_v = tape.value(sd);
            let mut mu_grad = Matrix::zeros(b, d);
            let mut sd_grad = Matrix::zeros(b, d);
            for k in 0..b * d {
                let (m, s) = (mu_v.data()[k], sd_v.data()[k].max(1e-12));
                kl_total += 0.5 * (m * m + s * s - 1.0 - 2.0 * s.ln());
                mu_grad.data_mut()[k] = train.kl_weight * m / b as f64;
                sd_grad.data_mut()[k] = train.kl_weight * (s - 1.0 / s) / b as f64;
            }

            let grads = tape.backward(&[(out, recon_grad), (mu, mu_grad), (sd, sd_grad)]);
            let all: Vec<Matrix> = dec_nodes[..DECODER_PARAMS]
                .iter()
                .chain(&enc_nodes)
                .map(|&node| {
                    let v = tape.value(node);
                    grads.get_or_zeros(node, v.rows(), v.cols())
                })
                .collect();
            opt.step(&mut params, &all);
        }
        final_loss = sq_error / (order.len() * pix) as f64;
        if !final_loss.is_finite() {
            return Err(Error::numeric(Some(epoch), "toy generator training diverged"));
        }
        log::debug!(
            "toy-generator epoch {epoch}: mse {final_loss:.6} kl {:.3}",
            kl_total / order.len() as f64
        );
    }

    let mut decoder = ParamSet::new();
    for (name, m) in params.iter().take(DECODER_PARAMS) {
        decoder.push(name, (**m).clone());
    }
    let generator = ToyGenerator::assemble(config, decoder, train.seed);

    // Held-out reconstruction from the posterior mean.
    let mut holdout_error = 0.0;
    for &i in &holdout_idx {
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::row_vector(inputs[i].clone()));
        let (mu, _, _) = encode(&mut tape, &params, false, x);
        let recon = decode_latent(&generator, &LatentVector::new(tape.value(mu).data().to_vec(), 0)?)?;
        holdout_error += recon.mean_abs_diff(&images[i]);
    }
    if !holdout_idx.is_empty() {
        holdout_error /= holdout_idx.len() as f64;
    }
    let report = GeneratorTrainReport {
        epochs_run: train.epochs,
        train_images: train_idx.len(),
        holdout_images: holdout_idx.len(),
        holdout_error,
        final_loss,
        under_trained: holdout_error >= train.reconstruction_gate,
    };
    if report.under_trained {
        log::warn!(
            "toy generator under-trained: held-out error {:.4} above gate {:.4}",
            holdout_error,
            train.reconstruction_gate
        );
    }
    Ok((generator, report))
}

/// The leading entries of the joint set are the decoder.
fn params_decoder_view(params: &ParamSet) -> ParamSet {
    let mut view = ParamSet::new();
    for (name, m) in params.iter().take(DECODER_PARAMS) {
        view.push_shared(name, Arc::clone(m));
    }
    view
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::dataset::{build_dataset, DatasetConfig};

    #[test]
    fn decode_is_deterministic_and_bounded() {
        let g = ToyGenerator::new(ToyGeneratorConfig::default(), 5);
        let zero = LatentVector::new(vec![0.0; 64], 0).unwrap();
        assert_eq!(decode_latent(&g, &zero).unwrap(), decode_latent(&g, &zero).unwrap());
        let mut big = LatentVector::sample(64, 9);
        big.values.iter_mut().for_each(|v| *v *= 10.0);
        let img = decode_latent(&g, &big).unwrap();
        assert!(img.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn wrong_latent_dimension_is_a_contract_error() {
        let g = ToyGenerator::new(ToyGeneratorConfig::default(), 5);
        let w = LatentVector::new(vec![0.0; 10], 0).unwrap();
        assert!(matches!(decode_latent(&g, &w), Err(Error::Contract(_))));
    }

    #[test]
    fn empty_public_split_is_rejected() {
        let r = train_toy_generator(ToyGeneratorConfig::default(), &[], &GeneratorTrainConfig::default());
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn short_training_is_seed_deterministic() {
        let data = build_dataset(&DatasetConfig {
            num_identities: 2,
            per_identity: 1,
            public_identities: 4,
            public_per_identity: 3,
            ..Default::default()
        })
        .unwrap();
        let images: Vec<_> = data.public.iter().map(|s| s.image.clone()).collect();
        let train = GeneratorTrainConfig {
            epochs: 2,
            batch_size: 4,
            ..Default::default()
        };
        let small = ToyGeneratorConfig {
            latent_dim: 8,
            hidden: 16,
            ..Default::default()
        };
        let (a, _) = train_toy_generator(small.clone(), &images, &train).unwrap();
        let (b, _) = train_toy_generator(small, &images, &train).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
    }
}
