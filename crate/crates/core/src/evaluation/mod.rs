//! Match rate, classifier-based attack accuracy and feature distances.

pub mod classifier;
pub mod report;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{generate_text, ImageTensor, TargetModel};
use crate::vocab::TokenSequence;

pub use classifier::{train_eval_classifier, ClassifierConfig, ClassifierTrainConfig, ClassifierTrainReport, EvalClassifier};
pub use report::{build_report, EvaluationReport, GridReport, TargetVerdict};

/// Case-sensitive substring test. With `normalize`, both sides are
/// lower-cased and whitespace runs collapse to one space first.
pub fn contains_answer(decoded: &str, answer: &str, normalize: bool) -> bool {
    if normalize {
        let norm = |s: &str| s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
        norm(decoded).contains(&norm(answer))
    } else {
        decoded.contains(answer)
    }
}

/// Fraction of `true` flags; `None` for an empty set.
pub fn rate(flags: &[bool]) -> Option<f64> {
    if flags.is_empty() {
        None
    } else {
        Some(flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64)
    }
}

/// Greedy-decodes each image and reports the fraction whose text contains
/// the matching answer.
pub fn match_rate(
    model: &dyn TargetModel,
    prompt: &TokenSequence,
    images: &[ImageTensor],
    answers: &[String],
    max_len: usize,
    normalize: bool,
) -> Result<f64> {
    if images.len() != answers.len() {
        return Err(Error::contract(format!(
            "{} images but {} answers",
            images.len(),
            answers.len()
        )));
    }
    let flags = images
        .iter()
        .zip(answers)
        .map(|(img, ans)| Ok(contains_answer(&generate_text(model, prompt, img, max_len)?.text(), ans, normalize)))
        .collect::<Result<Vec<_>>>()?;
    Ok(rate(&flags).unwrap_or(0.0))
}

/// Anything that maps an image to a feature vector.
pub trait FeatureExtractor: Send + Sync {
    fn features(&self, image: &ImageTensor) -> Result<Vec<f64>>;
}

/// Mean Euclidean distance from `features` to each reference vector.
pub fn feature_distance(features: &[f64], references: &[Vec<f64>]) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::config("no reference features for this label"));
    }
    let mut total = 0.0;
    for r in references {
        if r.len() != features.len() {
            return Err(Error::contract("feature dimensions differ"));
        }
        let sq: f64 = features.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum();
        total += sq.sqrt();
    }
    Ok(total / references.len() as f64)
}

/// Top-1 / top-5 hit for one reconstruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopK {
    pub top1: bool,
    pub top5: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub top1: f64,
    pub top5: f64,
    pub evaluated: usize,
    /// Targets whose label the classifier does not know.
    pub excluded: usize,
}

/// Top-k membership of the true label in the classifier's ranking.
pub fn attack_accuracy(classifier: &EvalClassifier, images: &[ImageTensor], labels: &[u32]) -> Result<AccuracyReport> {
    if images.len() != labels.len() {
        return Err(Error::contract("images and labels differ in length"));
    }
    let mut hits1 = 0;
    let mut hits5 = 0;
    let mut excluded = 0;
    for (img, &label) in images.iter().zip(labels) {
        match classifier.top_k(img, label)? {
            Some(t) => {
                hits1 += t.top1 as usize;
                hits5 += t.top5 as usize;
            }
            None => excluded += 1,
        }
    }
    let evaluated = images.len() - excluded;
    let frac = |h: usize| if evaluated == 0 { 0.0 } else { h as f64 / evaluated as f64 };
    Ok(AccuracyReport {
        top1: frac(hits1),
        top5: frac(hits5),
        evaluated,
        excluded,
    })
}
