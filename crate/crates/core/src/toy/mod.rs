//! Desk-scale stand-ins: a synthetic identity dataset, a small
//! vision-language target and a latent image generator.

pub mod benchmark;
pub mod dataset;
pub mod generator;
pub mod stack;
pub mod vlm;
