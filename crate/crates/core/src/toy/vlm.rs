//! Micro vision-language model: patch embedding, one causal attention block
//! over `[image patches; prompt; answer prefix]`, a tanh feature layer (the
//! penultimate representation) and a vocabulary head.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::losses::softmax;
use crate::model::{ForwardPass, ImageShape, SequenceOutput, TargetModel};
use crate::params::{Adam, Checkpoint, ParamSet};
use crate::seed;
use crate::tensor::Matrix;
use crate::toy::dataset::Sample;
use crate::vocab::{TokenId, TokenSequence, Vocabulary};

pub const REGISTRY_NAME: &str = "toy-vlm";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyVlmConfig {
    pub image: ImageShape,
    pub patch: usize,
    pub d_model: usize,
    pub ff: usize,
    pub feature_dim: usize,
    /// Longest prompt + answer prefix the text position table covers.
    pub max_text: usize,
    /// Multiplier on the tanh features outside training; the scaled features
    /// are the penultimate representation.
    pub feature_scale: f64,
    /// Multiplier on the logits outside training.
    pub logit_scale: f64,
}

impl Default for ToyVlmConfig {
    fn default() -> Self {
        Self {
            image: ImageShape::default(),
            patch: 8,
            d_model: 32,
            ff: 64,
            feature_dim: 32,
            max_text: 16,
            feature_scale: 0.3,
            logit_scale: 2.0,
        }
    }
}

impl ToyVlmConfig {
    fn patches(&self) -> usize {
        (self.image.height / self.patch) * (self.image.width / self.patch)
    }

    fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.image.channels
    }

    fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image.height % self.patch != 0 || self.image.width % self.patch != 0 {
            return Err(Error::config(format!(
                "patch size {} must divide image {}",
                self.patch, self.image
            )));
        }
        for (name, v) in [("feature_scale", self.feature_scale), ("logit_scale", self.logit_scale)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredConfig {
    model: ToyVlmConfig,
    vocab: Vocabulary,
}

#[derive(Debug, Clone, Copy)]
struct Slots {
    patch_w: usize,
    patch_b: usize,
    img_pos: usize,
    tok_emb: usize,
    txt_pos: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    wf: usize,
    bf: usize,
    head: usize,
    head_b: usize,
}

fn layout(config: &ToyVlmConfig, vocab: usize, rng: &mut impl rand::Rng) -> (ParamSet, Slots) {
    let d = config.d_model;
    let mut p = ParamSet::new();
    let slots = Slots {
        patch_w: p.push_init("patch_w", config.patch_dim(), d, 1.0, rng),
        patch_b: p.push_zeros("patch_b", 1, d),
        img_pos: p.push_init("img_pos", config.patches(), d, 0.3, rng),
        tok_emb: p.push_init("tok_emb", vocab, d, 1.0, rng),
        txt_pos: p.push_init("txt_pos", config.max_text, d, 0.3, rng),
        wq: p.push_init("wq", d, d, 1.0, rng),
        wk: p.push_init("wk", d, d, 1.0, rng),
        wv: p.push_init("wv", d, d, 1.0, rng),
        wo: p.push_init("wo", d, d, 0.5, rng),
        w1: p.push_init("w1", d, config.ff, 1.0, rng),
        b1: p.push_zeros("b1", 1, config.ff),
        w2: p.push_init("w2", config.ff, d, 0.5, rng),
        b2: p.push_zeros("b2", 1, d),
        wf: p.push_init("wf", d, config.feature_dim, 1.0, rng),
        bf: p.push_zeros("bf", 1, config.feature_dim),
        head: p.push_init("head", config.feature_dim, vocab, 1.0, rng),
        head_b: p.push_zeros("head_b", 1, vocab),
    };
    (p, slots)
}

#[derive(Debug, Clone)]
pub struct ToyVlm {
    config: ToyVlmConfig,
    vocab: Arc<Vocabulary>,
    params: ParamSet,
    slots: Slots,
    patch_index: Arc<Vec<usize>>,
    seed: u64,
    fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VlmTrainConfig {
    /// Upper bound on passes over the training split.
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Required teacher-forced token accuracy; training stops early once it
    /// is exactly 1.0.
    pub accuracy_gate: f64,
    /// Accuracy is measured every this many epochs.
    pub eval_every: usize,
    /// Standard deviation of Gaussian noise added to training images.
    pub pixel_noise: f64,
}

impl Default for VlmTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 16,
            learning_rate: 3e-3,
            seed: 0,
            accuracy_gate: 0.99,
            eval_every: 2,
            pixel_noise: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VlmTrainReport {
    pub epochs_run: usize,
    pub token_accuracy: f64,
    pub final_loss: f64,
    pub under_trained: bool,
}

impl ToyVlm {
    pub fn new(config: ToyVlmConfig, vocab: Arc<Vocabulary>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed, "toy-vlm/init");
        let (params, slots) = layout(&config, vocab.size(), &mut rng);
        Ok(Self::assemble(config, vocab, params, slots, seed))
    }

    fn assemble(config: ToyVlmConfig, vocab: Arc<Vocabulary>, params: ParamSet, slots: Slots, seed: u64) -> Self {
        let patch_index = Arc::new(patch_index(&config));
        let fingerprint = params.fingerprint();
        Self {
            config,
            vocab,
            params,
            slots,
            patch_index,
            seed,
            fingerprint,
        }
    }

    pub fn config(&self) -> &ToyVlmConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        let stored = StoredConfig {
            model: self.config.clone(),
            vocab: (*self.vocab).clone(),
        };
        Checkpoint::new(REGISTRY_NAME, self.seed, stored, &self.params, meta).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::<StoredConfig>::load(path, REGISTRY_NAME)?;
        let vocab = Arc::new(ckpt.config.vocab.clone());
        let template = ToyVlm::new(ckpt.config.model.clone(), Arc::clone(&vocab), ckpt.seed)?;
        let params = ckpt.param_set(&template.params, path)?;
        Ok(Self::assemble(ckpt.config.model, vocab, params, template.slots, ckpt.seed))
    }

    fn forward_with(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        trainable: bool,
        prompt: &[TokenId],
        image: NodeId,
        answer: &[TokenId],
    ) -> Result<(SequenceOutput, Vec<NodeId>)> {
        let cfg = &self.config;
        let img_len = tape.value(image).len();
        if tape.value(image).rows() != 1 || img_len != cfg.image.len() {
            return Err(Error::contract(format!(
                "toy VLM expects a 1x{} image row, got {:?}",
                cfg.image.len(),
                tape.value(image).shape()
            )));
        }
        if prompt.is_empty() {
            return Err(Error::contract("prompt must contain at least one token"));
        }
        let text_len = prompt.len() + answer.len();
        if text_len > cfg.max_text {
            return Err(Error::contract(format!(
                "prompt plus prefix has {text_len} tokens, model supports {}",
                cfg.max_text
            )));
        }
        let vocab = self.vocab.size();
        if let Some(t) = prompt.iter().chain(answer).find(|&&t| t >= vocab) {
            return Err(Error::contract(format!("token {t} outside vocabulary of size {vocab}")));
        }

        let bound: Vec<NodeId> = (0..params.len()).map(|i| tape.param(params.get(i), trainable)).collect();
        let s = &self.slots;
        let p = |slot: usize| bound[slot];

        let patches = cfg.patches();
        let x = tape.gather(image, Arc::clone(&self.patch_index), patches, cfg.patch_dim());
        let e_img = tape.matmul(x, p(s.patch_w));
        let e_img = tape.add_row(e_img, p(s.patch_b));
        let e_img = tape.add(e_img, p(s.img_pos));

        let ids: Vec<usize> = prompt.iter().chain(answer).copied().collect();
        let e_tok = tape.select_rows(p(s.tok_emb), &ids);
        let positions: Vec<usize> = (0..text_len).collect();
        let e_pos = tape.select_rows(p(s.txt_pos), &positions);
        let e_txt = tape.add(e_tok, e_pos);

        let h0 = tape.concat_rows(&[e_img, e_txt]);
        let seq = patches + text_len;
        let rows = answer.len() + 1;
        let query_rows: Vec<usize> = (seq - rows..seq).collect();
        let h0_q = tape.select_rows(h0, &query_rows);

        let q = tape.matmul(h0_q, p(s.wq));
        let k = tape.matmul(h0, p(s.wk));
        let v = tape.matmul(h0, p(s.wv));
        let scores = tape.matmul_nt(q, k);
        let scores = tape.scale(scores, 1.0 / (cfg.d_model as f64).sqrt());
        let attn = tape.causal_softmax(scores, seq - rows);
        let mixed = tape.matmul(attn, v);
        let mixed = tape.matmul(mixed, p(s.wo));
        let h1 = tape.add(h0_q, mixed);

        let ff = tape.matmul(h1, p(s.w1));
        let ff = tape.add_row(ff, p(s.b1));
        let ff = tape.tanh(ff);
        let ff = tape.matmul(ff, p(s.w2));
        let ff = tape.add_row(ff, p(s.b2));
        let h2 = tape.add(h1, ff);

        let feat = tape.matmul(h2, p(s.wf));
        let feat = tape.add_row(feat, p(s.bf));
        let feat = tape.tanh(feat);
        let logits = tape.matmul(feat, p(s.head));
        let logits = tape.add_row(logits, p(s.head_b));
        if trainable {
            return Ok((SequenceOutput { logits, penultimate: feat }, bound));
        }
        let penultimate = tape.scale(feat, cfg.feature_scale);
        let logits = tape.scale(logits, cfg.logit_scale);
        Ok((SequenceOutput { logits, penultimate }, bound))
    }

    /// Fraction of answer tokens (including the end token) whose
    /// teacher-forced argmax is correct.
    pub fn token_accuracy(&self, prompt: &TokenSequence, samples: &[Sample]) -> Result<f64> {
        let mut correct = 0usize;
        let mut total = 0usize;
        for s in samples {
            let targets = answer_with_end(&self.vocab, &s.answer)?;
            let pass = ForwardPass::on_image(self, prompt, &s.image, &targets[..targets.len() - 1])?;
            for (row, &t) in targets.iter().enumerate() {
                correct += usize::from(pass.step(row).argmax() == t);
                total += 1;
            }
        }
        Ok(if total == 0 { 0.0 } else { correct as f64 / total as f64 })
    }
}

fn answer_with_end(vocab: &Vocabulary, answer: &str) -> Result<Vec<TokenId>> {
    let mut ids = vocab.encode(answer)?;
    ids.push(vocab.end());
    Ok(ids)
}

fn patch_index(config: &ToyVlmConfig) -> Vec<usize> {
    let ImageShape { width, channels, .. } = config.image;
    let per_row = config.image.width / config.patch;
    let mut index = Vec::with_capacity(config.image.len());
    for p in 0..config.patches() {
        let (py, px) = (p / per_row, p % per_row);
        for dy in 0..config.patch {
            for dx in 0..config.patch {
                let y = py * config.patch + dy;
                let x = px * config.patch + dx;
                for c in 0..channels {
                    index.push((y * width + x) * channels + c);
                }
            }
        }
    }
    index
}

impl TargetModel for ToyVlm {
    fn name(&self) -> &str {
        REGISTRY_NAME
    }

    fn vocab(&self) -> &Arc<Vocabulary> {
        &self.vocab
    }

    fn image_shape(&self) -> ImageShape {
        self.config.image
    }

    fn penultimate_dim(&self) -> usize {
        self.config.feature_dim
    }

    fn forward(&self, tape: &mut Tape, prompt: &[TokenId], image: NodeId, answer: &[TokenId]) -> Result<SequenceOutput> {
        self.forward_with(tape, &self.params, false, prompt, image, answer)
            .map(|(out, _)| out)
    }

    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }
}

/// Teacher-forced cross-entropy training on `(prompt, image, answer)`
/// triples until every answer token (and the end token) is memorized or the
/// epoch budget runs out.
pub fn train_toy_vlm(
    model_config: ToyVlmConfig,
    vocab: Arc<Vocabulary>,
    prompt: &str,
    samples: &[Sample],
    train: &VlmTrainConfig,
) -> Result<(ToyVlm, VlmTrainReport)> {
    if samples.is_empty() {
        return Err(Error::config("cannot train the toy VLM on an empty split"));
    }
    let prompt_seq = TokenSequence::encode(prompt, Arc::clone(&vocab))?;
    let mut model = ToyVlm::new(model_config, Arc::clone(&vocab), train.seed)?;
    let targets: Vec<Vec<TokenId>> = samples
        .iter()
        .map(|s| answer_with_end(&vocab, &s.answer))
        .collect::<Result<_>>()?;

    let mut rng = seed::rng(train.seed, "toy-vlm/shuffle");
    let mut noise_rng = seed::rng(train.seed, "toy-vlm/noise");
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut params = model.params.clone();
    let mut opt = Adam::new(&params, train.learning_rate);
    let mut report = VlmTrainReport {
        epochs_run: 0,
        token_accuracy: 0.0,
        final_loss: f64::NAN,
        under_trained: true,
    };

    for epoch in 1..=train.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_tokens = 0usize;
        for batch in order.chunks(train.batch_size.max(1)) {
            let batch_tokens: usize = batch.iter().map(|&i| targets[i].len()).sum();
            let mut grads: Vec<Matrix> = (0..params.len())
                .map(|i| Matrix::zeros(params.get(i).rows(), params.get(i).cols()))
                .collect();
            for &i in batch {
                let ids = &targets[i];
                let mut tape = Tape::new();
                let mut pixels = samples[i].image.to_matrix();
                if train.pixel_noise > 0.0 {
                    for v in pixels.data_mut() {
                        let z: f64 = StandardNormal.sample(&mut noise_rng);
                        *v += train.pixel_noise * z;
                    }
                }
                let image = tape.constant(pixels);
                let (out, bound) = model.forward_with(
                    &mut tape,
                    &params,
                    true,
                    prompt_seq.ids(),
                    image,
                    &ids[..ids.len() - 1],
                )?;
                let logits = tape.value(out.logits);
                let mut seed_grad = Matrix::zeros(logits.rows(), logits.cols());
                for (row, &t) in ids.iter().enumerate() {
                    let probs = softmax(logits.row(row));
                    epoch_loss -= probs[t].max(1e-300).ln();
                    let g = seed_grad.row_mut(row);
                    for (gk, pk) in g.iter_mut().zip(&probs) {
                        *gk = pk / batch_tokens as f64;
                    }
                    g[t] -= 1.0 / batch_tokens as f64;
                }
                epoch_tokens += ids.len();
                let pen = tape.value(out.penultimate);
                let pen_zero = Matrix::zeros(pen.rows(), pen.cols());
                let g = tape.backward(&[(out.logits, seed_grad), (out.penultimate, pen_zero)]);
                for (slot, node) in bound.iter().enumerate() {
                    if let Some(gm) = g.get(*node) {
                        grads[slot].add_assign(gm);
                    }
                }
            }
            opt.step(&mut params, &grads);
        }
        report.epochs_run = epoch;
        report.final_loss = epoch_loss / epoch_tokens as f64;
        if !report.final_loss.is_finite() {
            return Err(Error::numeric(Some(epoch), "toy VLM training diverged"));
        }

        if epoch % train.eval_every.max(1) == 0 || epoch == train.epochs {
            model.params = params.clone();
            report.token_accuracy = model.token_accuracy(&prompt_seq, samples)?;
            log::debug!(
                "toy-vlm epoch {epoch}: loss {:.5} token accuracy {:.4}",
                report.final_loss,
                report.token_accuracy
            );
            if report.token_accuracy >= 1.0 {
                break;
            }
        }
    }

    model.params = params;
    model.fingerprint = model.params.fingerprint();
    report.token_accuracy = model.token_accuracy(&prompt_seq, samples)?;
    report.under_trained = report.token_accuracy < train.accuracy_gate;
    if report.under_trained {
        log::warn!(
            "toy VLM under-trained: token accuracy {:.4} below gate {:.4} after {} epochs",
            report.token_accuracy,
            train.accuracy_gate,
            report.epochs_run
        );
    }
    Ok((model, report))
}
