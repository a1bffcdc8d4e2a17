//! Per-component seed derivation.
//!
//! Every random stream is seeded with the first eight bytes (little endian)
//! of `SHA-256(master_seed_le || component)`, where `component` is a
//! slash-separated path such as `build/vlm` or `attack/smi-aw/lom/3/0`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn derive_seed(master: u64, component: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(component.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn rng(master: u64, component: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, component))
}
