//! Seeded randomness.
//!
//! Every random draw in the toolkit comes from one run seed. Consumers ask for
//! a named substream so that adding a new consumer never shifts the draws of
//! an existing one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive the seed of the substream `name` from the run seed.
pub fn substream(seed: u64, name: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n` distinct indices drawn uniformly from `0..population`, sorted ascending.
///
/// Callers must ensure `n <= population`.
pub fn sample_sorted(population: usize, n: usize, seed: u64) -> Vec<usize> {
    debug_assert!(n <= population);
    let mut rng = rng(seed);
    let mut picked = rand::seq::index::sample(&mut rng, population, n).into_vec();
    picked.sort_unstable();
    picked
}
