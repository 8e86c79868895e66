//! Deterministic random-number streams.
//!
//! Every random draw in the crate derives from a single experiment seed
//! through named substreams, so a (config, seed) pair fully determines all
//! outputs regardless of thread count or evaluation order. Substreams are
//! ChaCha8 generators whose stream id is a hash of a label (and an optional
//! index), keeping draws from different roles statistically independent.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// FNV-1a hash, used to map substream labels to ChaCha stream ids.
fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A generator for the substream named `label` under `seed`.
pub fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    indexed_stream(seed, label, 0)
}

/// A generator for the `index`-th substream named `label` under `seed`
/// (e.g. one per Monte-Carlo chain or per sample).
pub fn indexed_stream(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    let mut h = fnv1a64(label.as_bytes());
    for &b in index.to_le_bytes().iter() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(h);
    rng
}

/// Derives a child seed, for code that needs a fresh seed rather than a
/// generator (e.g. one seed per optimization step).
pub fn derive_seed(seed: u64, label: &str, index: u64) -> u64 {
    indexed_stream(seed, label, index).random()
}

/// `n` independent standard-normal draws.
pub fn normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}
