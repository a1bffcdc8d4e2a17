//! Target-model and generator contracts plus the operations built on them.
//!
//! A [`TargetModel`] is anything that can record a teacher-forced forward
//! pass on a [`Tape`]: given prompt tokens, an image node and an answer
//! prefix, it yields next-token logits and penultimate features for every
//! answer position. A [`Generator`] maps a latent node to an image node.
//! Everything else (single steps, greedy decoding, gradients with respect to
//! the latent) is derived here so adapters only implement those two calls.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::Matrix;
use crate::vocab::{TokenId, TokenSequence, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    pub const fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Default for ImageShape {
    fn default() -> Self {
        Self::new(32, 32, 3)
    }
}

impl fmt::Display for ImageShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

/// Image in HWC order with every pixel in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    shape: ImageShape,
    pixels: Vec<f64>,
}

impl ImageTensor {
    pub fn new(shape: ImageShape, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != shape.len() {
            return Err(Error::contract(format!(
                "image of shape {shape} needs {} pixels, got {}",
                shape.len(),
                pixels.len()
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::contract(format!("pixel value {p} outside [0, 1]")));
        }
        Ok(Self { shape, pixels })
    }

    /// Clamps every value into `[0, 1]`; NaN becomes 0.
    pub fn from_clamped(shape: ImageShape, mut pixels: Vec<f64>) -> Result<Self> {
        for p in &mut pixels {
            *p = if p.is_nan() { 0.0 } else { p.clamp(0.0, 1.0) };
        }
        Self::new(shape, pixels)
    }

    pub fn filled(shape: ImageShape, value: f64) -> Result<Self> {
        Self::new(shape, vec![value; shape.len()])
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.shape.width + x) * self.shape.channels + c]
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::row_vector(self.pixels.clone())
    }

    /// Mean absolute per-pixel difference.
    pub fn mean_abs_diff(&self, other: &ImageTensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        let total: f64 = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs())
            .sum();
        total / self.pixels.len() as f64
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let ImageShape {
            height,
            width,
            channels,
        } = self.shape;
        image::RgbImage::from_fn(width as u32, height as u32, |x, y| {
            let px = |c: usize| {
                let c = c.min(channels - 1);
                (self.at(y as usize, x as usize, c) * 255.0).round() as u8
            };
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn png_bytes(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_rgb8().write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.png_bytes()?)
    }
}

/// Generator input being optimized, with the seed it was drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentVector {
    pub values: Vec<f64>,
    pub rng_seed: u64,
}

impl LatentVector {
    pub fn new(values: Vec<f64>, rng_seed: u64) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(None, "latent vector has non-finite entries"));
        }
        Ok(Self { values, rng_seed })
    }

    /// Draws from the standard normal prior.
    pub fn sample(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        Self {
            values,
            rng_seed: seed,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Next-token logits and penultimate features at one answer position.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelStep {
    pub logits: Vec<f64>,
    pub penultimate: Vec<f64>,
}

impl ModelStep {
    /// Greedy choice; the lowest index wins exact ties.
    pub fn argmax(&self) -> TokenId {
        argmax(&self.logits)
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Nodes produced by a teacher-forced forward pass. Row `i` of both matrices
/// belongs to the prediction of answer token `i` given `answer[..i]`.
#[derive(Debug, Clone, Copy)]
pub struct SequenceOutput {
    pub logits: NodeId,
    pub penultimate: NodeId,
}

pub trait TargetModel: Send + Sync {
    fn name(&self) -> &str;

    fn vocab(&self) -> &Arc<Vocabulary>;

    fn image_shape(&self) -> ImageShape;

    fn penultimate_dim(&self) -> usize;

    /// Records the forward pass. `image` must be a `1 x image_shape().len()`
    /// node. The output has `answer.len() + 1` rows.
    fn forward(
        &self,
        tape: &mut Tape,
        prompt: &[TokenId],
        image: NodeId,
        answer: &[TokenId],
    ) -> Result<SequenceOutput>;

    /// Stable digest of the weights, used to key cached artifacts.
    fn fingerprint(&self) -> String;
}

pub trait Generator: Send + Sync {
    fn name(&self) -> &str;

    fn latent_dim(&self) -> usize;

    fn image_shape(&self) -> ImageShape;

    /// Maps a `1 x latent_dim()` node to a `1 x image_shape().len()` node with
    /// values in `[0, 1]`.
    fn decode(&self, tape: &mut Tape, latent: NodeId) -> Result<NodeId>;

    fn fingerprint(&self) -> String;
}

fn check_image(model: &dyn TargetModel, shape: ImageShape) -> Result<()> {
    if shape != model.image_shape() {
        return Err(Error::contract(format!(
            "model `{}` expects {} images, got {shape}",
            model.name(),
            model.image_shape()
        )));
    }
    Ok(())
}

fn check_latent(g: &dyn Generator, dim: usize) -> Result<()> {
    if dim != g.latent_dim() {
        return Err(Error::contract(format!(
            "generator `{}` has latent dimension {}, got {dim}",
            g.name(),
            g.latent_dim()
        )));
    }
    Ok(())
}

fn check_tokens(model: &dyn TargetModel, tokens: &[TokenId]) -> Result<()> {
    let size = model.vocab().size();
    match tokens.iter().find(|&&t| t >= size) {
        Some(t) => Err(Error::contract(format!("token {t} outside vocabulary of size {size}"))),
        None => Ok(()),
    }
}

/// A recorded forward pass whose single tracked leaf is either the latent or
/// the image itself.
pub struct ForwardPass {
    tape: Tape,
    input: NodeId,
    image: NodeId,
    output: SequenceOutput,
}

impl ForwardPass {
    /// Teacher-forced pass through `G(w)`; gradients flow to `w`.
    pub fn through_latent(
        model: &dyn TargetModel,
        generator: &dyn Generator,
        prompt: &TokenSequence,
        latent: &LatentVector,
        answer: &[TokenId],
    ) -> Result<Self> {
        check_latent(generator, latent.dim())?;
        check_image(model, generator.image_shape())?;
        check_tokens(model, prompt.ids())?;
        check_tokens(model, answer)?;
        let mut tape = Tape::new();
        let input = tape.var(Matrix::row_vector(latent.values.clone()));
        let image = generator.decode(&mut tape, input)?;
        let output = model.forward(&mut tape, prompt.ids(), image, answer)?;
        Ok(Self {
            tape,
            input,
            image,
            output,
        })
    }

    /// Teacher-forced pass on a fixed image; gradients flow to the pixels.
    pub fn on_image(
        model: &dyn TargetModel,
        prompt: &TokenSequence,
        image: &ImageTensor,
        answer: &[TokenId],
    ) -> Result<Self> {
        check_image(model, image.shape())?;
        check_tokens(model, prompt.ids())?;
        check_tokens(model, answer)?;
        let mut tape = Tape::new();
        let input = tape.var(image.to_matrix());
        let output = model.forward(&mut tape, prompt.ids(), input, answer)?;
        Ok(Self {
            tape,
            input,
            image: input,
            output,
        })
    }

    pub fn rows(&self) -> usize {
        self.tape.value(self.output.logits).rows()
    }

    pub fn step(&self, row: usize) -> ModelStep {
        ModelStep {
            logits: self.tape.value(self.output.logits).row(row).to_vec(),
            penultimate: self.tape.value(self.output.penultimate).row(row).to_vec(),
        }
    }

    pub fn steps(&self) -> Vec<ModelStep> {
        (0..self.rows()).map(|r| self.step(r)).collect()
    }

    pub fn image(&self, shape: ImageShape) -> Result<ImageTensor> {
        ImageTensor::from_clamped(shape, self.tape.value(self.image).data().to_vec())
    }

    /// Pulls back cotangents on the logits and penultimate features
    /// (`rows x vocab` and `rows x penultimate_dim`) to the tracked input.
    pub fn pullback(&self, logit_seed: Matrix, penultimate_seed: Matrix) -> Vec<f64> {
        let grads = self.tape.backward(&[
            (self.output.logits, logit_seed),
            (self.output.penultimate, penultimate_seed),
        ]);
        let v = self.tape.value(self.input);
        grads.get_or_zeros(self.input, v.rows(), v.cols()).into_vec()
    }

    pub fn logits(&self) -> &Matrix {
        self.tape.value(self.output.logits)
    }

    pub fn penultimate(&self) -> &Matrix {
        self.tape.value(self.output.penultimate)
    }
}

/// `M(t, x, y_<i)`: next-token logits and penultimate features after `prefix`.
pub fn target_step(
    model: &dyn TargetModel,
    prompt: &TokenSequence,
    image: &ImageTensor,
    prefix: &[TokenId],
) -> Result<ModelStep> {
    let pass = ForwardPass::on_image(model, prompt, image, prefix)?;
    Ok(pass.step(prefix.len()))
}

/// Greedy decoding until the end token or `max_len` tokens. The end token is
/// not included in the result.
pub fn generate_text(
    model: &dyn TargetModel,
    prompt: &TokenSequence,
    image: &ImageTensor,
    max_len: usize,
) -> Result<TokenSequence> {
    if max_len == 0 {
        return Err(Error::config("max_len must be at least 1"));
    }
    let end = model.vocab().end();
    let mut out = Vec::new();
    while out.len() < max_len {
        let next = target_step(model, prompt, image, &out)?.argmax();
        if next == end {
            break;
        }
        out.push(next);
    }
    TokenSequence::new(out, Arc::clone(model.vocab()))
}

/// `x = G(w)`.
pub fn decode_latent(generator: &dyn Generator, latent: &LatentVector) -> Result<ImageTensor> {
    check_latent(generator, latent.dim())?;
    let mut tape = Tape::new();
    let w = tape.constant(Matrix::row_vector(latent.values.clone()));
    let x = generator.decode(&mut tape, w)?;
    ImageTensor::from_clamped(generator.image_shape(), tape.value(x).data().to_vec())
}

pub type TargetLoader = fn(&Path) -> Result<Arc<dyn TargetModel>>;
pub type GeneratorLoader = fn(&Path) -> Result<Arc<dyn Generator>>;

/// Name-to-loader tables for target models and generators.
#[derive(Clone, Default)]
pub struct Registry {
    targets: BTreeMap<String, TargetLoader>,
    generators: BTreeMap<String, GeneratorLoader>,
}

impl Registry {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Registry with the toy models pre-registered.
    pub fn with_builtin() -> Self {
        let mut r = Self::empty();
        r.register_target(crate::toy::vlm::REGISTRY_NAME, |p| {
            Ok(Arc::new(crate::toy::vlm::ToyVlm::load(p)?))
        });
        r.register_generator(crate::toy::generator::REGISTRY_NAME, |p| {
            Ok(Arc::new(crate::toy::generator::ToyGenerator::load(p)?))
        });
        r
    }

    pub fn register_target(&mut self, name: &str, loader: TargetLoader) {
        self.targets.insert(name.to_string(), loader);
    }

    pub fn register_generator(&mut self, name: &str, loader: GeneratorLoader) {
        self.generators.insert(name.to_string(), loader);
    }

    pub fn load_target(&self, name: &str, checkpoint: &Path) -> Result<Arc<dyn TargetModel>> {
        let loader = self
            .targets
            .get(name)
            .ok_or_else(|| Error::UnknownModel(name.to_string()))?;
        loader(checkpoint)
    }

    pub fn load_generator(&self, name: &str, checkpoint: &Path) -> Result<Arc<dyn Generator>> {
        let loader = self
            .generators
            .get(name)
            .ok_or_else(|| Error::UnknownModel(name.to_string()))?;
        loader(checkpoint)
    }

    pub fn target_names(&self) -> impl Iterator<Item = &str> {
        self.targets.keys().map(String::as_str)
    }
}
