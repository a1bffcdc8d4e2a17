//! One complete attack on one target: initial selection over a latent pool,
//! inversion of every selected candidate, then augmentation-based final
//! selection.

use serde::{Deserialize, Serialize};

use crate::config::AttackConfig;
use crate::error::{Error, Result};
use crate::evaluation::{feature_distance, EvalClassifier, FeatureExtractor, TargetVerdict};
use crate::selection::{final_select, initial_select, AugmentConfig, InitialSelection, RankedCandidate};
use crate::strategies::{run_inversion, InversionResult, InversionTarget};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub selection: InitialSelection,
    /// One result per selected latent; `candidate_id` is the pool rank.
    pub candidates: Vec<InversionResult>,
    /// Survivors of final selection, best first.
    pub ranking: Vec<RankedCandidate>,
}

impl AttackOutcome {
    /// The top-ranked reconstruction.
    pub fn best(&self) -> &InversionResult {
        let id = self.ranking[0].candidate_id;
        self.candidates
            .iter()
            .find(|c| c.candidate_id == id)
            .expect("ranked candidate exists")
    }
}

/// Initial selection with the configured loss, pool size and seed.
pub fn select_initial(target: &InversionTarget<'_>, config: &AttackConfig) -> Result<InitialSelection> {
    config.validate()?;
    initial_select(target, config.pool_size, config.n_candidates, config.seed)
}

/// Inverts every latent of `selection`, one after another, and ranks the
/// results. The selection only depends on the loss and seed, so callers
/// running several strategies can share one.
pub fn attack_from_selection(
    target: &InversionTarget<'_>,
    config: &AttackConfig,
    augment: &AugmentConfig,
    selection: InitialSelection,
) -> Result<AttackOutcome> {
    if selection.selected.is_empty() {
        return Err(Error::config("initial selection is empty"));
    }
    let candidates = selection
        .selected
        .iter()
        .enumerate()
        .map(|(id, s)| run_inversion(target, config, s.latent.clone(), id))
        .collect::<Result<Vec<_>>>()?;
    let ranking = final_select(
        target.model,
        target.prompt,
        target.answer,
        target.loss,
        &candidates,
        config.n_augmentations,
        augment,
        config.seed,
    )?;
    Ok(AttackOutcome {
        selection,
        candidates,
        ranking,
    })
}

pub fn run_attack(target: &InversionTarget<'_>, config: &AttackConfig, augment: &AugmentConfig) -> Result<AttackOutcome> {
    let selection = select_initial(target, config)?;
    attack_from_selection(target, config, augment, selection)
}

/// Scores a reconstruction against identity `label`. `references` holds the
/// classifier features of that identity's private images.
pub fn judge(
    result: &InversionResult,
    label: u32,
    seed: u64,
    answer: &str,
    classifier: &EvalClassifier,
    references: &[Vec<f64>],
) -> Result<TargetVerdict> {
    let mut verdict = TargetVerdict {
        strategy: result.strategy,
        loss: result.loss,
        target: label,
        seed,
        answer: answer.to_string(),
        decoded: result.decoded.clone(),
        matched: result.final_match,
        top1: None,
        top5: None,
        delta_eval: None,
        delta_face: None,
        error: None,
    };
    match classifier.top_k(&result.image, label)? {
        Some(hit) => {
            verdict.top1 = Some(hit.top1);
            verdict.top5 = Some(hit.top5);
            let features = classifier.features(&result.image)?;
            verdict.delta_eval = Some(feature_distance(&features, references)?);
        }
        None => verdict.error = Some(format!("label {label} is not in the evaluation classifier")),
    }
    Ok(verdict)
}
