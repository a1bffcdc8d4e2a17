//! The four inversion loops and their bookkeeping.
//!
//! All four share one update: a teacher-forced forward pass through
//! `G(w)` covering every answer position, per-token losses, a weight per
//! token, and a single pullback of the weighted loss gradients to `w`. They
//! differ only in the schedule of weight vectors:
//!
//! | strategy | schedule                                      | updates      |
//! |----------|-----------------------------------------------|--------------|
//! | TMI      | `for k in 0..K { for i in 0..m { e_i } }`     | `m * K`      |
//! | TMI-C    | `for i in 0..m { for k in 0..K { e_i } }`     | `m * K`      |
//! | SMI      | `N` times uniform `1/m`                       | `N`          |
//! | SMI-AW   | `N` times [`adaptive_weights`]                | `N`          |
//!
//! with `K = floor(N / m)`.

use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{AnchorMode, AttackConfig, ConfidenceSource, LossKind, Strategy, UpdateRule};
use crate::error::{Error, Result};
use crate::evaluation::contains_answer;
use crate::losses::{softmax, IdentityLoss};
use crate::model::{argmax, decode_latent, target_step, ForwardPass, Generator, ImageTensor, LatentVector, TargetModel};
use crate::seed;
use crate::tensor::{l2_norm, Matrix};
use crate::vocab::{TokenId, TokenSequence};

/// Weights over answer tokens: `1/n` on the `n` tokens with probability
/// below `p_thres`, zero elsewhere, uniform when `n = 0`.
pub fn adaptive_weights(probs: &[f64], p_thres: f64) -> Result<Vec<f64>> {
    if probs.is_empty() {
        return Err(Error::contract("adaptive weights need at least one token probability"));
    }
    if !(p_thres > 0.0 && p_thres <= 1.0) {
        return Err(Error::config(format!("p_thres must lie in (0, 1], got {p_thres}")));
    }
    let low: Vec<bool> = probs.iter().map(|&p| p < p_thres).collect();
    let n = low.iter().filter(|&&l| l).count();
    if n == 0 {
        return Ok(uniform_weights(probs.len()));
    }
    let w = 1.0 / n as f64;
    Ok(low.into_iter().map(|l| if l { w } else { 0.0 }).collect())
}

pub fn uniform_weights(m: usize) -> Vec<f64> {
    vec![1.0 / m as f64; m]
}

/// `K = floor(N / m)`.
pub fn steps_per_token(steps: usize, m: usize) -> Result<usize> {
    if m == 0 {
        return Err(Error::contract("answer must contain at least one token"));
    }
    if steps < m {
        return Err(Error::config(format!(
            "token budget below one step per token: N = {steps}, m = {m}"
        )));
    }
    Ok(steps / m)
}

/// Number of updates a strategy performs for `N` steps and `m` answer tokens.
pub fn expected_updates(strategy: Strategy, steps: usize, m: usize) -> Result<usize> {
    if strategy.is_token_based() {
        Ok(m * steps_per_token(steps, m)?)
    } else {
        Ok(steps)
    }
}

/// Position of an update inside its strategy's loop nest. Indices are
/// zero-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Phase {
    /// TMI: sweep `sweep`, token `token`.
    Sweep { sweep: usize, token: usize },
    /// TMI-C: token `token`, repetition `repeat`.
    Token { token: usize, repeat: usize },
    /// SMI and SMI-AW.
    Sequence,
}

impl Phase {
    /// The single token driving this update, if any.
    pub fn token(&self) -> Option<usize> {
        match *self {
            Phase::Sweep { token, .. } | Phase::Token { token, .. } => Some(token),
            Phase::Sequence => None,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phase::Sweep { sweep, token } => write!(f, "k={sweep} i={token}"),
            Phase::Token { token, repeat } => write!(f, "i={token} k={repeat}"),
            Phase::Sequence => f.write_str("seq"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub phase: Phase,
    pub token_losses: Vec<f64>,
    pub token_probs: Vec<f64>,
    /// Present for the sequence strategies.
    pub alpha: Option<Vec<f64>>,
    /// The loss actually differentiated at this step.
    pub aggregate: f64,
    pub grad_norm: f64,
    /// Whether greedy decoding from the pre-update latent contains the answer.
    pub matched: bool,
}

/// Optional extra term on the latent. Off by default.
pub trait LatentPrior: Send + Sync {
    /// Value and gradient at `latent`.
    fn evaluate(&self, latent: &[f64]) -> (f64, Vec<f64>);
}

/// Everything fixed for the duration of one inversion.
#[derive(Clone, Copy)]
pub struct InversionTarget<'a> {
    pub model: &'a dyn TargetModel,
    pub generator: &'a dyn Generator,
    pub prompt: &'a TokenSequence,
    pub answer: &'a TokenSequence,
    pub loss: &'a IdentityLoss,
    pub prior: Option<&'a dyn LatentPrior>,
}

impl<'a> InversionTarget<'a> {
    pub fn new(
        model: &'a dyn TargetModel,
        generator: &'a dyn Generator,
        prompt: &'a TokenSequence,
        answer: &'a TokenSequence,
        loss: &'a IdentityLoss,
    ) -> Self {
        Self {
            model,
            generator,
            prompt,
            answer,
            loss,
            prior: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionResult {
    pub candidate_id: usize,
    pub strategy: Strategy,
    pub loss: LossKind,
    pub initial: LatentVector,
    pub latent: LatentVector,
    pub image: ImageTensor,
    /// Greedy decode of the final image.
    pub decoded: String,
    pub final_match: bool,
    pub records: Vec<StepRecord>,
    pub config: AttackConfig,
    pub config_hash: String,
    pub total_updates: usize,
    /// Steps of the budget left unused by the floor rule.
    pub remainder_dropped: usize,
}

fn schedule(strategy: Strategy, steps: usize, m: usize) -> Result<Vec<Phase>> {
    Ok(match strategy {
        Strategy::Tmi => {
            let k = steps_per_token(steps, m)?;
            (0..k)
                .flat_map(|sweep| (0..m).map(move |token| Phase::Sweep { sweep, token }))
                .collect()
        }
        Strategy::TmiC => {
            let k = steps_per_token(steps, m)?;
            (0..m)
                .flat_map(|token| (0..k).map(move |repeat| Phase::Token { token, repeat }))
                .collect()
        }
        Strategy::Smi | Strategy::SmiAw => vec![Phase::Sequence; steps],
    })
}

/// Greedy decode of `image`, reusing teacher-forced rows while the greedy
/// prefix agrees with `answer`.
pub(crate) fn greedy_with_head_start(
    model: &dyn TargetModel,
    prompt: &TokenSequence,
    image: &ImageTensor,
    logits: &Matrix,
    answer: &[TokenId],
    max_len: usize,
) -> Result<Vec<TokenId>> {
    let end = model.vocab().end();
    let mut out = Vec::new();
    for r in 0..logits.rows() {
        if out.len() == max_len {
            return Ok(out);
        }
        let tok = argmax(logits.row(r));
        if tok == end {
            return Ok(out);
        }
        out.push(tok);
        if answer.get(r) != Some(&tok) {
            break;
        }
    }
    while out.len() < max_len {
        let tok = target_step(model, prompt, image, &out)?.argmax();
        if tok == end {
            break;
        }
        out.push(tok);
    }
    Ok(out)
}

/// `P(y_i)` after the model's own greedy prefix instead of `y_<i`.
fn free_running_probs(
    model: &dyn TargetModel,
    prompt: &TokenSequence,
    image: &ImageTensor,
    teacher_forced: &[f64],
    greedy: &[TokenId],
    answer: &[TokenId],
) -> Result<Vec<f64>> {
    (0..answer.len())
        .map(|i| {
            let prefix = &greedy[..i.min(greedy.len())];
            if prefix == &answer[..prefix.len()] && prefix.len() == i {
                Ok(teacher_forced[i])
            } else {
                let step = target_step(model, prompt, image, prefix)?;
                Ok(softmax(&step.logits)[answer[i]])
            }
        })
        .collect()
}

fn with_step(err: Error, step: usize) -> Error {
    match err {
        Error::Numeric { message, .. } => Error::Numeric {
            step: Some(step),
            message,
        },
        other => other,
    }
}

/// Runs `config.strategy` from `initial`.
pub fn run_inversion(
    target: &InversionTarget<'_>,
    config: &AttackConfig,
    initial: LatentVector,
    candidate_id: usize,
) -> Result<InversionResult> {
    config.validate()?;
    if target.loss.kind() != config.loss {
        return Err(Error::config(format!(
            "loss `{}` does not match configured loss `{}`",
            target.loss.kind(),
            config.loss
        )));
    }
    let answer = target.answer.ids();
    let m = answer.len();
    if m == 0 {
        return Err(Error::contract("target answer is empty"));
    }
    let phases = schedule(config.strategy, config.steps, m)?;
    let remainder_dropped = config.steps - phases.len();
    if remainder_dropped > 0 {
        log::debug!(
            "{}: N = {} is not a multiple of m = {m}; dropping {remainder_dropped} steps",
            config.strategy,
            config.steps
        );
    }

    let image_shape = target.generator.image_shape();
    let vocab_size = target.model.vocab().size();
    let pen_dim = target.model.penultimate_dim();
    let answer_text = target.answer.text();
    let mut anchor_rng = seed::rng(config.seed, &format!("anchor/resample/{candidate_id}"));
    let mut velocity = vec![0.0; initial.dim()];
    let mut w = initial.clone();
    let mut records = Vec::with_capacity(phases.len());
    let mut total_updates = 0;

    for (step, phase) in phases.into_iter().enumerate() {
        let pass = ForwardPass::through_latent(target.model, target.generator, target.prompt, &w, &answer[..m - 1])?;
        let anchor_point = match (config.anchor_mode, target.loss.anchor()) {
            (AnchorMode::Resample, Some(a)) => Some(a.sample(&mut anchor_rng)),
            _ => None,
        };
        let mut token_losses = Vec::with_capacity(m);
        let mut token_probs = Vec::with_capacity(m);
        let mut grads = Vec::with_capacity(m);
        for (i, &y) in answer.iter().enumerate() {
            let (report, grad) = target
                .loss
                .evaluate(&pass.step(i), y, i, anchor_point.as_deref())
                .map_err(|e| with_step(e, step))?;
            token_losses.push(report.loss);
            token_probs.push(report.probability);
            grads.push(grad);
        }

        let image = pass.image(image_shape)?;
        let greedy = greedy_with_head_start(
            target.model,
            target.prompt,
            &image,
            pass.logits(),
            answer,
            config.decode_max_len,
        )?;
        let decoded = target.model.vocab().decode(&greedy);
        let matched = contains_answer(&decoded, &answer_text, config.normalize_match);

        if config.strategy == Strategy::SmiAw && config.confidence == ConfidenceSource::FreeRunning {
            token_probs = free_running_probs(target.model, target.prompt, &image, &token_probs, &greedy, answer)?;
        }
        let (weights, alpha) = match phase.token() {
            Some(i) => {
                let mut e = vec![0.0; m];
                e[i] = 1.0;
                (e, None)
            }
            None => {
                let a = if config.strategy == Strategy::SmiAw {
                    adaptive_weights(&token_probs, config.p_thres)?
                } else {
                    uniform_weights(m)
                };
                (a.clone(), Some(a))
            }
        };
        let aggregate = match phase.token() {
            Some(i) => token_losses[i],
            None => weights.iter().zip(&token_losses).map(|(a, l)| a * l).sum(),
        };

        let mut logit_seed = Matrix::zeros(m, vocab_size);
        let mut pen_seed = Matrix::zeros(m, pen_dim);
        for (i, g) in grads.iter().enumerate() {
            if weights[i] == 0.0 {
                continue;
            }
            for (dst, src) in logit_seed.row_mut(i).iter_mut().zip(&g.logits) {
                *dst = weights[i] * src;
            }
            if let Some(p) = &g.penultimate {
                for (dst, src) in pen_seed.row_mut(i).iter_mut().zip(p) {
                    *dst = weights[i] * src;
                }
            }
        }
        let mut grad = pass.pullback(logit_seed, pen_seed);
        if let Some(prior) = target.prior {
            let (_, pg) = prior.evaluate(&w.values);
            for (g, p) in grad.iter_mut().zip(pg) {
                *g += p;
            }
        }

        let record = StepRecord {
            step,
            phase,
            token_losses,
            token_probs,
            alpha,
            aggregate,
            grad_norm: l2_norm(&grad),
            matched,
        };
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(Box::new(record)));
        }
        records.push(record);

        match config.update {
            UpdateRule::Gradient => {
                for (wi, gi) in w.values.iter_mut().zip(&grad) {
                    *wi -= config.beta * gi;
                }
            }
            UpdateRule::Momentum { mu } => {
                for ((wi, vi), gi) in w.values.iter_mut().zip(&mut velocity).zip(&grad) {
                    *vi = mu * *vi + gi;
                    *wi -= config.beta * *vi;
                }
            }
        }
        total_updates += 1;
    }

    let image = decode_latent(target.generator, &w)?;
    let greedy = crate::model::generate_text(target.model, target.prompt, &image, config.decode_max_len)?;
    let decoded = greedy.text();
    let final_match = contains_answer(&decoded, &answer_text, config.normalize_match);
    Ok(InversionResult {
        candidate_id,
        strategy: config.strategy,
        loss: config.loss,
        initial,
        latent: w,
        image,
        decoded,
        final_match,
        records,
        config: config.clone(),
        config_hash: config.hash(),
        total_updates,
        remainder_dropped,
    })
}

fn run_as(
    strategy: Strategy,
    target: &InversionTarget<'_>,
    config: &AttackConfig,
    initial: LatentVector,
) -> Result<InversionResult> {
    let config = AttackConfig {
        strategy,
        ..config.clone()
    };
    run_inversion(target, &config, initial, 0)
}

pub fn run_tmi(target: &InversionTarget<'_>, config: &AttackConfig, initial: LatentVector) -> Result<InversionResult> {
    run_as(Strategy::Tmi, target, config, initial)
}

pub fn run_tmi_c(target: &InversionTarget<'_>, config: &AttackConfig, initial: LatentVector) -> Result<InversionResult> {
    run_as(Strategy::TmiC, target, config, initial)
}

pub fn run_smi(target: &InversionTarget<'_>, config: &AttackConfig, initial: LatentVector) -> Result<InversionResult> {
    run_as(Strategy::Smi, target, config, initial)
}

pub fn run_smi_aw(target: &InversionTarget<'_>, config: &AttackConfig, initial: LatentVector) -> Result<InversionResult> {
    run_as(Strategy::SmiAw, target, config, initial)
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";")
}

/// Trace CSV: `step,phase,token_losses,token_probs,alpha,aggregate,grad_norm,matched`
/// with `;`-joined vectors.
pub fn trace_csv(records: &[StepRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "step",
        "phase",
        "token_losses",
        "token_probs",
        "alpha",
        "aggregate",
        "grad_norm",
        "matched",
    ])?;
    for r in records {
        w.write_record([
            r.step.to_string(),
            r.phase.to_string(),
            join(&r.token_losses),
            join(&r.token_probs),
            r.alpha.as_deref().map(join).unwrap_or_default(),
            r.aggregate.to_string(),
            r.grad_norm.to_string(),
            r.matched.to_string(),
        ])?;
    }
    w.flush()?;
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn write_trace_csv(records: &[StepRecord], path: &Path) -> Result<()> {
    let bytes = trace_csv(records)?;
    crate::io::write_atomic(path, &bytes)
}

/// Writes the trace as CSV to any sink.
pub fn write_trace_to(records: &[StepRecord], mut sink: impl Write) -> Result<()> {
    sink.write_all(&trace_csv(records)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Strategy;
    use proptest::prelude::*;

    #[test]
    fn adaptive_weight_cases() {
        let a = adaptive_weights(&[0.9999, 0.5, 0.9999, 0.2], 0.999).unwrap();
        assert_eq!(a, vec![0.0, 0.5, 0.0, 0.5]);
        assert_eq!(adaptive_weights(&[0.9995; 4], 0.999).unwrap(), vec![0.25; 4]);
        assert_eq!(adaptive_weights(&[0.1; 4], 0.999).unwrap(), vec![0.25; 4]);
        assert!(matches!(adaptive_weights(&[], 0.5), Err(Error::Contract(_))));
    }

    #[test]
    fn per_token_budget() {
        assert_eq!(steps_per_token(70, 7).unwrap(), 10);
        assert_eq!(steps_per_token(70, 4).unwrap(), 17);
        assert_eq!(steps_per_token(5, 5).unwrap(), 1);
        assert!(matches!(steps_per_token(3, 4), Err(Error::Config(_))));
    }

    #[test]
    fn schedules_follow_loop_order() {
        let tokens = |s: Strategy| -> Vec<usize> {
            schedule(s, 6, 3).unwrap().iter().map(|p| p.token().unwrap()).collect()
        };
        assert_eq!(tokens(Strategy::Tmi), vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(tokens(Strategy::TmiC), vec![0, 0, 1, 1, 2, 2]);
        assert_eq!(schedule(Strategy::Tmi, 70, 4).unwrap().len(), 68);
        assert_eq!(schedule(Strategy::SmiAw, 70, 4).unwrap().len(), 70);
    }

    proptest! {
        #[test]
        fn adaptive_weights_lie_on_the_simplex(
            probs in proptest::collection::vec(0.0f64..=1.0, 1..12),
            p_thres in 0.001f64..=1.0,
        ) {
            let a = adaptive_weights(&probs, p_thres).unwrap();
            prop_assert!(a.iter().all(|&x| x >= 0.0));
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn update_counts_match_contract(n in 1usize..200, m in 1usize..12) {
            for s in Strategy::ALL {
                match expected_updates(s, n, m) {
                    Ok(u) => prop_assert_eq!(u, schedule(s, n, m).unwrap().len()),
                    Err(_) => prop_assert!(s.is_token_based() && n < m),
                }
            }
        }
    }

    #[test]
    fn trace_csv_has_one_row_per_record() {
        let r = StepRecord {
            step: 0,
            phase: Phase::Sequence,
            token_losses: vec![1.0, 2.0],
            token_probs: vec![0.5, 0.25],
            alpha: Some(vec![0.5, 0.5]),
            aggregate: 1.5,
            grad_norm: 0.1,
            matched: false,
        };
        let text = String::from_utf8(trace_csv(&[r.clone(), r]).unwrap()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1], "0,seq,1;2,0.5;0.25,0.5;0.5,1.5,0.1,false");
    }
}
