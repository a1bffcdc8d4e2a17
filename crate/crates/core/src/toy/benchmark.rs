//! The strategy comparison benchmark: every strategy attacks every private
//! identity from the same initial latent, once per seed.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{AttackConfig, LossKind, Strategy};
use crate::error::Result;
use crate::evaluation::{rate, FeatureExtractor, TargetVerdict};
use crate::losses::{estimate_reg_anchor, IdentityLoss};
use crate::pipeline::judge;
use crate::selection::initial_select;
use crate::strategies::{run_inversion, InversionTarget};
use crate::toy::stack::ToyStack;
use crate::vocab::TokenSequence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    /// Template for every run; strategy and seed are filled in per run.
    pub attack: AttackConfig,
    pub seeds: u64,
    pub anchor_count: usize,
    pub anchor_seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            attack: AttackConfig {
                loss: LossKind::Lom,
                steps: 70,
                beta: 0.05,
                p_thres: 0.999,
                ..AttackConfig::default()
            },
            seeds: 10,
            anchor_count: 2000,
            anchor_seed: 0,
        }
    }
}

/// Seed-averaged results of one strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyScore {
    pub strategy: Strategy,
    pub match_rate: f64,
    pub top1: f64,
    pub top5: f64,
    pub delta_eval: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkOutcome {
    pub scores: Vec<StrategyScore>,
    /// How often the shared initial latent alone was classified top-1.
    pub initial_top1: f64,
    pub verdicts: Vec<TargetVerdict>,
}

impl BenchmarkOutcome {
    pub fn score(&self, strategy: Strategy) -> Option<&StrategyScore> {
        self.scores.iter().find(|s| s.strategy == strategy)
    }
}

/// Runs `strategies` on every (private identity, seed) pair. The initial
/// latent of a pair is the best of `pool_size` samples under the configured
/// loss and is shared by all strategies.
pub fn run_benchmark(stack: &ToyStack, config: &BenchmarkConfig, strategies: &[Strategy]) -> Result<BenchmarkOutcome> {
    config.attack.validate()?;
    let dataset = &stack.dataset;
    let vocab = Arc::clone(&dataset.vocab);
    let prompt = TokenSequence::encode(&dataset.prompt, Arc::clone(&vocab))?;
    let anchor = if config.attack.loss == LossKind::Lom {
        let public: Vec<_> = dataset.public.iter().map(|s| s.image.clone()).collect();
        Some(Arc::new(estimate_reg_anchor(
            &*stack.vlm,
            &prompt,
            &public,
            config.anchor_count,
            config.anchor_seed,
        )?))
    } else {
        None
    };
    let loss = IdentityLoss::new(config.attack.loss, config.attack.lambda, anchor)?;

    let mut references: BTreeMap<u32, Vec<Vec<f64>>> = BTreeMap::new();
    for s in &dataset.private {
        references
            .entry(s.identity_id)
            .or_default()
            .push(stack.classifier.features(&s.image)?);
    }

    let jobs: Vec<(u32, String, u64)> = dataset
        .private_identities()
        .flat_map(|spec| (0..config.seeds).map(move |seed| (spec.identity_id, spec.name.clone(), seed)))
        .collect();
    let per_job: Vec<(bool, Vec<TargetVerdict>)> = jobs
        .par_iter()
        .map(|(label, name, seed)| {
            let answer = TokenSequence::answer(name, Arc::clone(&vocab))?;
            let target = InversionTarget::new(&*stack.vlm, &*stack.generator, &prompt, &answer, &loss);
            let initial = initial_select(&target, config.attack.pool_size, 1, *seed)?;
            let latent = initial.selected[0].latent.clone();
            let init_image = crate::model::decode_latent(&*stack.generator, &latent)?;
            let init_hit = stack.classifier.top_k(&init_image, *label)?.is_some_and(|h| h.top1);
            let references = references.get(label).map(Vec::as_slice).unwrap_or(&[]);
            let verdicts = strategies
                .iter()
                .map(|&strategy| {
                    let run = AttackConfig {
                        strategy,
                        seed: *seed,
                        ..config.attack.clone()
                    };
                    let result = run_inversion(&target, &run, latent.clone(), 0)?;
                    judge(&result, *label, *seed, name, &stack.classifier, references)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((init_hit, verdicts))
        })
        .collect::<Result<_>>()?;

    let initial_top1 = rate(&per_job.iter().map(|(hit, _)| *hit).collect::<Vec<_>>()).unwrap_or(0.0);
    let verdicts: Vec<TargetVerdict> = per_job.into_iter().flat_map(|(_, v)| v).collect();
    let scores = strategies
        .iter()
        .map(|&strategy| {
            let runs: Vec<&TargetVerdict> = verdicts.iter().filter(|v| v.strategy == strategy).collect();
            let mean = |f: &dyn Fn(&TargetVerdict) -> Option<f64>| {
                let xs: Vec<f64> = runs.iter().filter_map(|v| f(v)).collect();
                xs.iter().sum::<f64>() / xs.len().max(1) as f64
            };
            StrategyScore {
                strategy,
                match_rate: mean(&|v| Some(f64::from(u8::from(v.matched)))),
                top1: mean(&|v| v.top1.map(|b| f64::from(u8::from(b)))),
                top5: mean(&|v| v.top5.map(|b| f64::from(u8::from(b)))),
                delta_eval: mean(&|v| v.delta_eval),
                runs: runs.len(),
            }
        })
        .collect();
    Ok(BenchmarkOutcome {
        scores,
        initial_top1,
        verdicts,
    })
}
