mod support;

use std::sync::atomic::{AtomicUsize, Ordering};

use proptest::prelude::*;
use rand::Rng;
use support::Untrained;
use vlminv_core::seed;
use vlminv_core::strategies::{run_inversion, trace_csv, InversionTarget, LatentPrior, Phase};
use vlminv_core::{AttackConfig, Generator, LatentVector, LossKind, Strategy};

fn config(strategy: Strategy, loss: LossKind, steps: usize) -> AttackConfig {
    AttackConfig {
        strategy,
        loss,
        steps,
        ..AttackConfig::default()
    }
}

#[derive(Default)]
struct Counter(AtomicUsize);

impl LatentPrior for Counter {
    fn evaluate(&self, latent: &[f64]) -> (f64, Vec<f64>) {
        self.0.fetch_add(1, Ordering::SeqCst);
        (0.0, vec![0.0; latent.len()])
    }
}

#[test]
fn seventy_steps_over_four_tokens_drop_a_remainder_of_two() {
    let toy = Untrained::new(1);
    let mut rng = seed::rng(0, "remainder");
    let answer = toy.answer(4, &mut rng);
    let loss = toy.loss(LossKind::Ce, &mut rng);
    let counter = Counter::default();
    let mut target = InversionTarget::new(&toy.vlm, &toy.generator, &toy.prompt, &answer, &loss);
    target.prior = Some(&counter);
    for strategy in [Strategy::Tmi, Strategy::TmiC] {
        counter.0.store(0, Ordering::SeqCst);
        let r = run_inversion(&target, &config(strategy, LossKind::Ce, 70), LatentVector::sample(64, 0), 0).unwrap();
        assert_eq!(counter.0.load(Ordering::SeqCst), 68);
        assert_eq!((r.total_updates, r.remainder_dropped, r.records.len()), (68, 2, 68));
    }
}

#[test]
fn token_orders_follow_each_schedule() {
    let toy = Untrained::new(1);
    let mut rng = seed::rng(0, "order");
    let answer = toy.answer(3, &mut rng);
    let loss = toy.loss(LossKind::Mml, &mut rng);
    let target = InversionTarget::new(&toy.vlm, &toy.generator, &toy.prompt, &answer, &loss);
    let tokens = |s| {
        run_inversion(&target, &config(s, LossKind::Mml, 6), LatentVector::sample(64, 0), 0)
            .unwrap()
            .records
            .iter()
            .map(|r| r.phase.token())
            .collect::<Vec<_>>()
    };
    assert_eq!(tokens(Strategy::Tmi), [0, 1, 2, 0, 1, 2].map(Some));
    assert_eq!(tokens(Strategy::TmiC), [0, 0, 1, 1, 2, 2].map(Some));
    assert!(tokens(Strategy::Smi).iter().all(Option::is_none));
}

#[test]
fn zero_rate_leaves_the_latent_bitwise_unchanged() {
    let toy = Untrained::new(2);
    let mut rng = seed::rng(0, "beta0");
    let answer = toy.answer(2, &mut rng);
    for loss_kind in LossKind::ALL {
        let loss = toy.loss(loss_kind, &mut rng);
        let target = InversionTarget::new(&toy.vlm, &toy.generator, &toy.prompt, &answer, &loss);
        for strategy in Strategy::ALL {
            let w = LatentVector::sample(64, 9);
            let c = AttackConfig {
                beta: 0.0,
                ..config(strategy, loss_kind, 6)
            };
            let r = run_inversion(&target, &c, w.clone(), 0).unwrap();
            assert_eq!(r.latent, w, "{strategy}/{loss_kind}");
        }
    }
}

#[test]
fn single_token_answers_make_all_strategies_coincide() {
    let toy = Untrained::new(3);
    let mut rng = seed::rng(0, "m1");
    let answer = toy.answer(1, &mut rng);
    let loss = toy.loss(LossKind::Lom, &mut rng);
    let target = InversionTarget::new(&toy.vlm, &toy.generator, &toy.prompt, &answer, &loss);
    let run = |s| run_inversion(&target, &config(s, LossKind::Lom, 9), LatentVector::sample(64, 4), 0).unwrap();
    let tmi = run(Strategy::Tmi);
    let tmi_c = run(Strategy::TmiC);
    let smi = run(Strategy::Smi);
    assert_eq!(tmi.latent, tmi_c.latent);
    assert_eq!(tmi.latent, smi.latent);
    let agg = |r: &vlminv_core::InversionResult| r.records.iter().map(|x| x.aggregate).collect::<Vec<_>>();
    assert_eq!(agg(&tmi), agg(&tmi_c));
    assert_eq!(agg(&tmi), agg(&smi));
}

#[test]
fn every_strategy_and_loss_runs_and_traces_consistently() {
    let toy = Untrained::new(4);
    let mut rng = seed::rng(0, "matrix");
    let answer = toy.answer(3, &mut rng);
    for loss_kind in LossKind::ALL {
        let loss = toy.loss(loss_kind, &mut rng);
        let target = InversionTarget::new(&toy.vlm, &toy.generator, &toy.prompt, &answer, &loss);
        for strategy in Strategy::ALL {
            let c = config(strategy, loss_kind, 10);
            let r = run_inversion(&target, &c, LatentVector::sample(64, 2), 7).unwrap();
            assert_eq!(r.candidate_id, 7);
            assert_eq!(r.records.len(), r.total_updates);
            assert!(r.latent.values.iter().all(|v| v.is_finite()));
            for (i, rec) in r.records.iter().enumerate() {
                assert_eq!(rec.step, i);
                assert_eq!(rec.token_losses.len(), 3);
                let expected = match rec.phase {
                    Phase::Sequence => {
                        let alpha = rec.alpha.as_ref().expect("sequence steps record weights");
                        alpha.iter().zip(&rec.token_losses).map(|(a, l)| a * l).sum()
                    }
                    _ => rec.token_losses[rec.phase.token().unwrap()],
                };
                assert!((rec.aggregate - expected).abs() <= 1e-12 * expected.abs().max(1.0));
            }
            let csv = trace_csv(&r.records).unwrap();
            assert_eq!(csv.iter().filter(|&&b| b == b'\n').count(), r.records.len() + 1);
            let again = run_inversion(&target, &c, LatentVector::sample(64, 2), 7).unwrap();
            assert_eq!(trace_csv(&again.records).unwrap(), csv, "{strategy}/{loss_kind} is not deterministic");
        }
    }
}

#[test]
fn smi_weights_are_uniform() {
    let toy = Untrained::new(5);
    let mut rng = seed::rng(0, "uniform");
    let answer = toy.answer(4, &mut rng);
    let loss = toy.loss(LossKind::Ce, &mut rng);
    let target = InversionTarget::new(&toy.vlm, &toy.generator, &toy.prompt, &answer, &loss);
    let r = run_inversion(&target, &config(Strategy::Smi, LossKind::Ce, 3), LatentVector::sample(64, 1), 0).unwrap();
    for rec in &r.records {
        assert_eq!(rec.alpha.as_deref(), Some(&[0.25; 4][..]));
    }
}

#[test]
fn budget_below_one_step_per_token_is_rejected() {
    let toy = Untrained::new(6);
    let mut rng = seed::rng(0, "budget");
    let answer = toy.answer(4, &mut rng);
    let loss = toy.loss(LossKind::Ce, &mut rng);
    let target = InversionTarget::new(&toy.vlm, &toy.generator, &toy.prompt, &answer, &loss);
    for s in [Strategy::Tmi, Strategy::TmiC] {
        assert!(run_inversion(&target, &config(s, LossKind::Ce, 3), LatentVector::sample(64, 1), 0).is_err());
    }
    assert!(run_inversion(&target, &config(Strategy::Smi, LossKind::Ce, 3), LatentVector::sample(64, 1), 0).is_ok());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// With every token below the threshold the adaptive weights are the
    /// uniform ones, so one step of each strategy lands on the same latent.
    #[test]
    fn smi_aw_equals_smi_when_no_token_is_confident(seed in any::<u64>(), m in 1usize..6, kind in 0usize..3) {
        let toy = Untrained::new(10);
        let mut rng = seed::rng(seed, "coincide");
        let answer = toy.answer(m, &mut rng);
        let loss_kind = LossKind::ALL[kind];
        let loss = toy.loss(loss_kind, &mut rng);
        let target = InversionTarget::new(&toy.vlm, &toy.generator, &toy.prompt, &answer, &loss);
        let w = LatentVector::sample(toy.generator.latent_dim(), rng.random());
        let smi = run_inversion(&target, &config(Strategy::Smi, loss_kind, 1), w.clone(), 0).unwrap();
        let aw = run_inversion(&target, &config(Strategy::SmiAw, loss_kind, 1), w, 0).unwrap();
        prop_assume!(smi.records[0].token_probs.iter().all(|&p| p < 0.999));
        let (a, b) = (smi.records[0].aggregate, aw.records[0].aggregate);
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(b.abs()));
        for (x, y) in smi.latent.values.iter().zip(&aw.latent.values) {
            prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(y.abs()).max(1e-300));
        }
    }

    #[test]
    fn update_count_follows_the_budget(steps in 1usize..30, m in 1usize..5, which in 0usize..4) {
        prop_assume!(steps >= m);
        let toy = Untrained::new(11);
        let mut rng = seed::rng(steps as u64, "budget-prop");
        let answer = toy.answer(m, &mut rng);
        let loss = toy.loss(LossKind::Ce, &mut rng);
        let counter = Counter::default();
        let mut target = InversionTarget::new(&toy.vlm, &toy.generator, &toy.prompt, &answer, &loss);
        target.prior = Some(&counter);
        let strategy = Strategy::ALL[which];
        let r = run_inversion(&target, &config(strategy, LossKind::Ce, steps), LatentVector::sample(64, 0), 0).unwrap();
        let expected = if strategy.is_token_based() { m * (steps / m) } else { steps };
        prop_assert_eq!(counter.0.load(Ordering::SeqCst), expected);
        prop_assert_eq!(r.total_updates, expected);
    }
}
