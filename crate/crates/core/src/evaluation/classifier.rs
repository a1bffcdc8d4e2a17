//! Identity classifier trained on the private split, used only to score
//! reconstructions.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::evaluation::{FeatureExtractor, TopK};
use crate::losses::softmax;
use crate::model::{ImageShape, ImageTensor};
use crate::params::{Adam, Checkpoint, ParamSet};
use crate::seed;
use crate::tensor::Matrix;

pub const CHECKPOINT_KIND: &str = "eval-classifier";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub image: ImageShape,
    pub hidden: usize,
    /// Identity id for each output class.
    pub labels: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierTrainConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub accuracy_gate: f64,
    /// Standard deviation of Gaussian noise added to training images.
    pub pixel_noise: f64,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            accuracy_gate: 0.95,
            pixel_noise: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTrainReport {
    pub epochs_run: usize,
    pub train_accuracy: f64,
    pub final_loss: f64,
    pub under_trained: bool,
}

/// `softmax(W2 tanh(W1 x + b1) + b2)` over identity labels.
#[derive(Debug, Clone)]
pub struct EvalClassifier {
    config: ClassifierConfig,
    params: ParamSet,
    seed: u64,
}

struct Nodes {
    hidden: NodeId,
    logits: NodeId,
    bound: Vec<NodeId>,
}

impl EvalClassifier {
    pub fn new(config: ClassifierConfig, seed: u64) -> Result<Self> {
        if config.labels.is_empty() {
            return Err(Error::config("classifier needs at least one label"));
        }
        let mut rng = seed::rng(seed, "eval-classifier/init");
        let mut params = ParamSet::new();
        params.push_init("w1", config.image.len(), config.hidden, 1.0, &mut rng);
        params.push_zeros("b1", 1, config.hidden);
        params.push_init("w2", config.hidden, config.labels.len(), 1.0, &mut rng);
        params.push_zeros("b2", 1, config.labels.len());
        Ok(Self { config, params, seed })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn labels(&self) -> &[u32] {
        &self.config.labels
    }

    pub fn fingerprint(&self) -> String {
        self.params.fingerprint()
    }

    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        Checkpoint::new(CHECKPOINT_KIND, self.seed, self.config.clone(), &self.params, meta).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::<ClassifierConfig>::load(path, CHECKPOINT_KIND)?;
        let template = Self::new(ckpt.config.clone(), ckpt.seed)?;
        let params = ckpt.param_set(&template.params, path)?;
        Ok(Self {
            config: ckpt.config,
            params,
            seed: ckpt.seed,
        })
    }

    fn record(&self, tape: &mut Tape, params: &ParamSet, trainable: bool, input: NodeId) -> Nodes {
        let bound: Vec<NodeId> = (0..params.len()).map(|i| tape.param(params.get(i), trainable)).collect();
        let h = tape.matmul(input, bound[0]);
        let h = tape.add_row(h, bound[1]);
        let hidden = tape.tanh(h);
        let o = tape.matmul(hidden, bound[2]);
        let logits = tape.add_row(o, bound[3]);
        Nodes { hidden, logits, bound }
    }

    fn check(&self, image: &ImageTensor) -> Result<()> {
        if image.shape() != self.config.image {
            return Err(Error::contract(format!(
                "classifier expects {} images, got {}",
                self.config.image,
                image.shape()
            )));
        }
        Ok(())
    }

    /// Class logits and hidden features.
    pub fn evaluate(&self, image: &ImageTensor) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check(image)?;
        let mut tape = Tape::new();
        let x = tape.constant(image.to_matrix());
        let n = self.record(&mut tape, &self.params, false, x);
        Ok((tape.value(n.logits).data().to_vec(), tape.value(n.hidden).data().to_vec()))
    }

    /// Class indices by decreasing logit; lower index first on ties.
    pub fn ranking(&self, image: &ImageTensor) -> Result<Vec<usize>> {
        let (logits, _) = self.evaluate(image)?;
        let mut order: Vec<usize> = (0..logits.len()).collect();
        order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
        Ok(order)
    }

    pub fn predict(&self, image: &ImageTensor) -> Result<u32> {
        Ok(self.config.labels[self.ranking(image)?[0]])
    }

    /// `None` when `label` is not one of the classifier's classes.
    pub fn top_k(&self, image: &ImageTensor, label: u32) -> Result<Option<TopK>> {
        let Some(class) = self.config.labels.iter().position(|&l| l == label) else {
            return Ok(None);
        };
        let rank = self.ranking(image)?.iter().position(|&c| c == class).expect("class ranked");
        Ok(Some(TopK {
            top1: rank == 0,
            top5: rank < 5,
        }))
    }

    pub fn accuracy(&self, images: &[ImageTensor], labels: &[u32]) -> Result<f64> {
        let mut hits = 0;
        for (img, &l) in images.iter().zip(labels) {
            hits += (self.predict(img)? == l) as usize;
        }
        Ok(hits as f64 / images.len().max(1) as f64)
    }
}

impl FeatureExtractor for EvalClassifier {
    fn features(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        Ok(self.evaluate(image)?.1)
    }
}

/// Cross-entropy training with Adam over `(image, label)` pairs.
pub fn train_eval_classifier(
    images: &[ImageTensor],
    labels: &[u32],
    train: &ClassifierTrainConfig,
) -> Result<(EvalClassifier, ClassifierTrainReport)> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::config("classifier training needs a non-empty labelled split"));
    }
    let mut classes: Vec<u32> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let targets: Vec<usize> = labels.iter().map(|l| classes.binary_search(l).expect("label present")).collect();
    let config = ClassifierConfig {
        image: images[0].shape(),
        hidden: train.hidden,
        labels: classes,
    };
    let mut model = EvalClassifier::new(config, train.seed)?;
    let mut params = model.params.clone();
    let mut opt = Adam::new(&params, train.learning_rate);
    let mut rng = seed::rng(train.seed, "eval-classifier/shuffle");
    let mut noise_rng = seed::rng(train.seed, "eval-classifier/noise");
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut final_loss = f64::NAN;
    let mut epochs_run = 0;

    for epoch in 1..=train.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(train.batch_size.max(1)) {
            let cols = images[0].pixels().len();
            let mut x = Matrix::zeros(batch.len(), cols);
            for (r, &i) in batch.iter().enumerate() {
                x.row_mut(r).copy_from_slice(images[i].pixels());
            }
            if train.pixel_noise > 0.0 {
                for v in x.data_mut() {
                    let z: f64 = StandardNormal.sample(&mut noise_rng);
                    *v += train.pixel_noise * z;
                }
            }
            let mut tape = Tape::new();
            let input = tape.constant(x);
            let nodes = model.record(&mut tape, &params, true, input);
            let logits = tape.value(nodes.logits);
            let mut seed_grad = Matrix::zeros(logits.rows(), logits.cols());
            for (r, &i) in batch.iter().enumerate() {
                let p = softmax(logits.row(r));
                total -= p[targets[i]].max(1e-300).ln();
                let g = seed_grad.row_mut(r);
                for (gk, pk) in g.iter_mut().zip(&p) {
                    *gk = pk / batch.len() as f64;
                }
                g[targets[i]] -= 1.0 / batch.len() as f64;
            }
            let g = tape.backward(&[(nodes.logits, seed_grad)]);
            let grads: Vec<Matrix> = nodes
                .bound
                .iter()
                .enumerate()
                .map(|(k, &n)| g.get_or_zeros(n, params.get(k).rows(), params.get(k).cols()))
                .collect();
            opt.step(&mut params, &grads);
        }
        epochs_run = epoch;
        final_loss = total / images.len() as f64;
        if !final_loss.is_finite() {
            return Err(Error::numeric(Some(epoch), "classifier training diverged"));
        }
    }
    model.params = params;
    let train_accuracy = model.accuracy(images, labels)?;
    let under_trained = train_accuracy < train.accuracy_gate;
    if under_trained {
        log::warn!(
            "evaluation classifier under-trained: accuracy {train_accuracy:.4} below gate {:.4}",
            train.accuracy_gate
        );
    }
    Ok((
        model,
        ClassifierTrainReport {
            epochs_run,
            train_accuracy,
            final_loss,
            under_trained,
        },
    ))
}
