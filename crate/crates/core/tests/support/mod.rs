#![allow(dead_code)]

use std::path::Path;
use std::sync::{Arc, OnceLock};

use rand::Rng;
use vlminv_core::losses::IdentityLoss;
use vlminv_core::toy::dataset::{toy_vocabulary, PROMPT};
use vlminv_core::toy::generator::{ToyGenerator, ToyGeneratorConfig};
use vlminv_core::toy::stack::{build_toy_stack, ToyStack, ToyStackConfig};
use vlminv_core::toy::vlm::{ToyVlm, ToyVlmConfig};
use vlminv_core::{LossKind, RegAnchor, TargetModel, TokenSequence};

/// The default toy stack, trained once per target dir.
pub fn default_stack() -> &'static ToyStack {
    static STACK: OnceLock<ToyStack> = OnceLock::new();
    STACK.get_or_init(|| {
        let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("default-stack");
        build_toy_stack(&ToyStackConfig::default(), &dir, false).expect("default toy stack builds")
    })
}

/// Untrained models at the default sizes; cheap to make.
pub struct Untrained {
    pub vlm: ToyVlm,
    pub generator: ToyGenerator,
    pub prompt: TokenSequence,
}

impl Untrained {
    pub fn new(seed: u64) -> Self {
        let vocab = Arc::new(toy_vocabulary());
        Self {
            prompt: TokenSequence::encode(PROMPT, Arc::clone(&vocab)).unwrap(),
            vlm: ToyVlm::new(ToyVlmConfig::default(), vocab, seed).unwrap(),
            generator: ToyGenerator::new(ToyGeneratorConfig::default(), seed + 1),
        }
    }

    pub fn answer(&self, m: usize, rng: &mut impl Rng) -> TokenSequence {
        let vocab = self.vlm.vocab();
        let words: Vec<usize> = (0..vocab.size()).filter(|&t| !vocab.is_special(t)).collect();
        let ids = (0..m).map(|_| words[rng.random_range(0..words.len())]).collect();
        TokenSequence::new(ids, Arc::clone(vocab)).unwrap()
    }

    /// `kind` with a random anchor when it needs one.
    pub fn loss(&self, kind: LossKind, rng: &mut impl Rng) -> IdentityLoss {
        let anchor = (kind == LossKind::Lom).then(|| {
            let dim = self.vlm.penultimate_dim();
            let features: Vec<Vec<f64>> = (0..3).map(|_| (0..dim).map(|_| rng.random_range(-0.5..0.5)).collect()).collect();
            Arc::new(RegAnchor::from_features(&features, 3, 0, self.vlm.fingerprint(), self.prompt.text()).unwrap())
        });
        IdentityLoss::new(kind, 1.0, anchor).unwrap()
    }
}
