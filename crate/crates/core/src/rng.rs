//! Deterministic stream derivation.
//!
//! Everything stochastic in the pipeline draws from a ChaCha stream derived
//! from `(master_seed, purpose, index)`. Streams are independent of execution
//! order, so training can be interrupted and resumed (or individual samples
//! regenerated) with bit-identical draws.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a, used only to turn purpose strings into stable stream labels.
fn fnv1a64(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Independent RNG for `(master_seed, purpose, index)`.
pub fn derive_rng(master_seed: u64, purpose: &str, index: u64) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    seed[0..8].copy_from_slice(&master_seed.to_le_bytes());
    seed[8..16].copy_from_slice(&fnv1a64(purpose).to_le_bytes());
    seed[16..24].copy_from_slice(&index.to_le_bytes());
    seed[24..32].copy_from_slice(&0x7479_7065_646e_6573u64.to_le_bytes());
    ChaCha8Rng::from_seed(seed)
}

/// A single u64 drawn from a derived stream; handy for nested seeding.
pub fn derive_seed(master_seed: u64, purpose: &str, index: u64) -> u64 {
    use rand::RngCore;
    derive_rng(master_seed, purpose, index).next_u64()
}
