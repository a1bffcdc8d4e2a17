mod support;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use support::Untrained;
use vlminv_core::model::decode_latent;
use vlminv_core::seed;
use vlminv_core::selection::{final_select, initial_select, pool_latent, sequence_loss, AugmentConfig};
use vlminv_core::strategies::{run_inversion, InversionTarget};
use vlminv_core::{AttackConfig, Generator, LossKind};

#[test]
fn initial_selection_equals_a_full_sort() {
    let toy = Untrained::new(1);
    let mut rng = seed::rng(0, "select");
    let answer = toy.answer(3, &mut rng);
    let loss = toy.loss(LossKind::Lom, &mut rng);
    let target = InversionTarget::new(&toy.vlm, &toy.generator, &toy.prompt, &answer, &loss);
    let dim = toy.generator.latent_dim();
    for seed in [0, 1, 2] {
        let got = initial_select(&target, 400, 16, seed).unwrap();
        let mut brute: Vec<(f64, usize)> = (0..400)
            .map(|j| {
                let img = decode_latent(&toy.generator, &pool_latent(dim, seed, j)).unwrap();
                (sequence_loss(&toy.vlm, &toy.prompt, &answer, &loss, &img).unwrap(), j)
            })
            .collect();
        brute.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let expected: Vec<usize> = brute[..16].iter().map(|b| b.1).collect();
        assert_eq!(got.selected.iter().map(|s| s.pool_index).collect::<Vec<_>>(), expected);
        for s in &got.selected {
            assert_eq!(s.latent, pool_latent(dim, seed, s.pool_index));
        }
        assert_eq!(got.scores.len(), 400);
        assert_eq!(got.pool.min, brute[0].0);
    }
}

#[test]
fn more_candidates_than_pool_is_rejected() {
    let toy = Untrained::new(2);
    let mut rng = seed::rng(0, "reject");
    let answer = toy.answer(2, &mut rng);
    let loss = toy.loss(LossKind::Ce, &mut rng);
    let target = InversionTarget::new(&toy.vlm, &toy.generator, &toy.prompt, &answer, &loss);
    assert!(initial_select(&target, 4, 5, 0).is_err());
    assert!(initial_select(&target, 4, 0, 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn final_selection_keeps_half_in_any_order(n in 1usize..9, shuffle in any::<u64>()) {
        let toy = Untrained::new(3);
        let mut rng = seed::rng(0, "final");
        let answer = toy.answer(2, &mut rng);
        let loss = toy.loss(LossKind::Mml, &mut rng);
        let target = InversionTarget::new(&toy.vlm, &toy.generator, &toy.prompt, &answer, &loss);
        let config = AttackConfig { loss: LossKind::Mml, steps: 2, ..AttackConfig::default() };
        let candidates: Vec<_> = (0..n)
            .map(|id| run_inversion(&target, &config, pool_latent(64, 5, id), id).unwrap())
            .collect();
        let augment = AugmentConfig::default();
        let ranked = final_select(&toy.vlm, &toy.prompt, &answer, &loss, &candidates, 4, &augment, 1).unwrap();
        prop_assert_eq!(ranked.len(), n.div_ceil(2));
        prop_assert!(ranked.windows(2).all(|w| w[0].mean_loss <= w[1].mean_loss));
        let mut permuted = candidates.clone();
        permuted.shuffle(&mut seed::rng(shuffle, "perm"));
        let again = final_select(&toy.vlm, &toy.prompt, &answer, &loss, &permuted, 4, &augment, 1).unwrap();
        prop_assert_eq!(again, ranked);
    }
}
