//! Central finite differences against the analytic latent gradient, through
//! the generator and the target for each loss.

mod support;

use proptest::prelude::*;
use rand::Rng;
use support::Untrained;
use vlminv_core::losses::IdentityLoss;
use vlminv_core::model::{decode_latent, ForwardPass};
use vlminv_core::seed;
use vlminv_core::{Generator, LatentVector, LossKind, Matrix, TargetModel, TokenSequence};

const H: f64 = 1e-5;

struct Probe<'a> {
    toy: &'a Untrained,
    answer: &'a TokenSequence,
    loss: &'a IdentityLoss,
    token: usize,
}

impl Probe<'_> {
    fn pass(&self, w: &LatentVector) -> ForwardPass {
        let ids = self.answer.ids();
        ForwardPass::through_latent(&self.toy.vlm, &self.toy.generator, &self.toy.prompt, w, &ids[..ids.len() - 1]).unwrap()
    }

    fn value(&self, w: &LatentVector) -> f64 {
        let y = self.answer.ids()[self.token];
        self.loss.evaluate(&self.pass(w).step(self.token), y, self.token, None).unwrap().0.loss
    }

    fn gradient(&self, w: &LatentVector) -> Vec<f64> {
        let m = self.answer.len();
        let y = self.answer.ids()[self.token];
        let pass = self.pass(w);
        let (_, g) = self.loss.evaluate(&pass.step(self.token), y, self.token, None).unwrap();
        let mut logits = Matrix::zeros(m, self.toy.vlm.vocab().size());
        logits.row_mut(self.token).copy_from_slice(&g.logits);
        let mut pen = Matrix::zeros(m, self.toy.vlm.penultimate_dim());
        if let Some(p) = g.penultimate {
            pen.row_mut(self.token).copy_from_slice(&p);
        }
        pass.pullback(logits, pen)
    }
}

fn central_difference(f: impl Fn(&LatentVector) -> f64, w: &LatentVector) -> Vec<f64> {
    (0..w.dim())
        .map(|j| {
            let mut plus = w.clone();
            plus.values[j] += H;
            let mut minus = w.clone();
            minus.values[j] -= H;
            (f(&plus) - f(&minus)) / (2.0 * H)
        })
        .collect()
}

fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs() / scale).fold(0.0, f64::max)
}

#[test]
fn every_loss_matches_finite_differences() {
    let toy = Untrained::new(5);
    for kind in LossKind::ALL {
        let mut rng = seed::rng(1, &format!("fd/{kind}"));
        for _ in 0..20 {
            let answer = toy.answer(rng.random_range(1..=4), &mut rng);
            let loss = toy.loss(kind, &mut rng);
            let probe = Probe {
                toy: &toy,
                answer: &answer,
                loss: &loss,
                token: rng.random_range(0..answer.len()),
            };
            let w = LatentVector::sample(toy.generator.latent_dim(), rng.random());
            let err = max_relative_error(&probe.gradient(&w), &central_difference(|w| probe.value(w), &w));
            assert!(err < 1e-4, "{kind}: relative error {err:e}");
        }
    }
}

#[test]
fn single_logit_matches_finite_differences() {
    let toy = Untrained::new(6);
    let mut rng = seed::rng(2, "fd/logit");
    let answer = toy.answer(3, &mut rng);
    let ids = answer.ids();
    for _ in 0..5 {
        let w = LatentVector::sample(toy.generator.latent_dim(), rng.random());
        let row = rng.random_range(0..3);
        let j = rng.random_range(0..toy.vlm.vocab().size());
        let logit = |w: &LatentVector| {
            ForwardPass::through_latent(&toy.vlm, &toy.generator, &toy.prompt, w, &ids[..2]).unwrap().step(row).logits[j]
        };
        let pass = ForwardPass::through_latent(&toy.vlm, &toy.generator, &toy.prompt, &w, &ids[..2]).unwrap();
        let mut seed = Matrix::zeros(3, toy.vlm.vocab().size());
        seed.row_mut(row)[j] = 1.0;
        let analytic = pass.pullback(seed, Matrix::zeros(3, toy.vlm.penultimate_dim()));
        let err = max_relative_error(&analytic, &central_difference(logit, &w));
        assert!(err < 1e-4, "relative error {err:e}");
    }
}

#[test]
fn mean_pixel_matches_finite_differences() {
    let toy = Untrained::new(7);
    let mut rng = seed::rng(3, "fd/pixel");
    let mean_pixel = |w: &LatentVector| {
        let img = decode_latent(&toy.generator, w).unwrap();
        img.pixels().iter().sum::<f64>() / img.pixels().len() as f64
    };
    for _ in 0..5 {
        let w = LatentVector::sample(toy.generator.latent_dim(), rng.random());
        let mut tape = vlminv_core::autodiff::Tape::new();
        let input = tape.var(Matrix::row_vector(w.values.clone()));
        let image = toy.generator.decode(&mut tape, input).unwrap();
        let n = tape.value(image).len();
        let grads = tape.backward(&[(image, Matrix::from_fn(1, n, |_, _| 1.0 / n as f64))]);
        let analytic = grads.get_or_zeros(input, 1, w.dim()).into_vec();
        let err = max_relative_error(&analytic, &central_difference(mean_pixel, &w));
        assert!(err < 1e-4, "relative error {err:e}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn directional_derivatives_agree(seed in any::<u64>(), kind in 0usize..3, m in 1usize..4) {
        let toy = Untrained::new(8);
        let mut rng = seed::rng(seed, "fd/direction");
        let answer = toy.answer(m, &mut rng);
        let loss = toy.loss(LossKind::ALL[kind], &mut rng);
        let probe = Probe { toy: &toy, answer: &answer, loss: &loss, token: rng.random_range(0..m) };
        let w = LatentVector::sample(toy.generator.latent_dim(), seed);
        let dir = LatentVector::sample(toy.generator.latent_dim(), seed ^ 1);
        let along = |t: f64| {
            let mut p = w.clone();
            for (x, d) in p.values.iter_mut().zip(&dir.values) {
                *x += t * d;
            }
            probe.value(&p)
        };
        let numeric = (along(H) - along(-H)) / (2.0 * H);
        let analytic: f64 = probe.gradient(&w).iter().zip(&dir.values).map(|(g, d)| g * d).sum();
        prop_assert!((analytic - numeric).abs() <= 1e-4 * analytic.abs().max(numeric.abs()).max(1e-6));
    }
}
