//! Model inversion for autoregressive vision-language models.
//!
//! Given a differentiable [`TargetModel`], a latent [`Generator`], a prompt
//! and a target answer, the strategies in [`strategies`] optimize a latent
//! so that the generated image makes the model produce the answer. The
//! [`toy`] module provides a small synthetic dataset, target and generator
//! so everything runs on a laptop.
//!
//! ```no_run
//! use std::sync::Arc;
//! use vlminv_core::{
//!     losses::IdentityLoss, strategies::{run_inversion, InversionTarget},
//!     AttackConfig, LatentVector, LossKind, TokenSequence,
//!     toy::stack::{build_toy_stack, ToyStackConfig},
//! };
//!
//! let stack = build_toy_stack(&ToyStackConfig::default(), "run/build".as_ref(), false)?;
//! let vocab = Arc::clone(&stack.dataset.vocab);
//! let prompt = TokenSequence::encode(&stack.dataset.prompt, Arc::clone(&vocab))?;
//! let answer = TokenSequence::answer(&stack.dataset.identities[0].name, vocab)?;
//! let loss = IdentityLoss::new(LossKind::Mml, 1.0, None)?;
//! let target = InversionTarget::new(&*stack.vlm, &*stack.generator, &prompt, &answer, &loss);
//! let config = AttackConfig { loss: LossKind::Mml, ..Default::default() };
//! let result = run_inversion(&target, &config, LatentVector::sample(64, 1), 0)?;
//! println!("{} -> {}", answer.text(), result.decoded);
//! # Ok::<(), vlminv_core::Error>(())
//! ```

pub mod autodiff;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod losses;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod seed;
pub mod selection;
pub mod strategies;
pub mod tensor;
pub mod toy;
pub mod vocab;

pub use config::{AnchorMode, AttackConfig, ConfidenceSource, LossKind, Strategy, UpdateRule};
pub use error::{Error, Result};
pub use losses::{RegAnchor, TokenLossReport};
pub use model::{
    decode_latent, generate_text, target_step, Generator, ImageShape, ImageTensor, LatentVector, ModelStep, Registry,
    TargetModel,
};
pub use strategies::{InversionResult, StepRecord};
pub use tensor::Matrix;
pub use vocab::{TokenId, TokenSequence, Vocabulary};
