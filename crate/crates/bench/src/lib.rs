//! Fixtures shared by the benchmarks: untrained toy models at the default
//! sizes, so timings do not depend on a build.

use std::sync::Arc;

use vlminv_core::losses::IdentityLoss;
use vlminv_core::toy::dataset::{toy_vocabulary, PROMPT};
use vlminv_core::toy::generator::{ToyGenerator, ToyGeneratorConfig};
use vlminv_core::toy::vlm::{ToyVlm, ToyVlmConfig};
use vlminv_core::{Generator, LatentVector, LossKind, RegAnchor, TargetModel, TokenSequence};

pub struct Fixture {
    pub vlm: ToyVlm,
    pub generator: ToyGenerator,
    pub prompt: TokenSequence,
    pub answer: TokenSequence,
    pub loss: IdentityLoss,
    pub latent: LatentVector,
}

impl Fixture {
    /// A three-token answer under the LOM loss.
    pub fn new() -> Self {
        let vocab = Arc::new(toy_vocabulary());
        let prompt = TokenSequence::encode(PROMPT, Arc::clone(&vocab)).unwrap();
        let words: Vec<usize> = (0..vocab.size()).filter(|&t| !vocab.is_special(t)).take(3).collect();
        let answer = TokenSequence::new(words, Arc::clone(&vocab)).unwrap();
        let vlm = ToyVlm::new(ToyVlmConfig::default(), vocab, 1).unwrap();
        let generator = ToyGenerator::new(ToyGeneratorConfig::default(), 2);
        let dim = vlm.penultimate_dim();
        let anchor = RegAnchor::from_features(&[vec![0.0; dim]], 1, 0, vlm.fingerprint(), prompt.text()).unwrap();
        let loss = IdentityLoss::new(LossKind::Lom, 1.0, Some(Arc::new(anchor))).unwrap();
        let latent = LatentVector::sample(generator.latent_dim(), 3);
        Self {
            vlm,
            generator,
            prompt,
            answer,
            loss,
            latent,
        }
    }
}

impl Default for Fixture {
    fn default() -> Self {
        Self::new()
    }
}
