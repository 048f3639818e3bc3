//! Seed handling. Every source of randomness derives from one root seed
//! through named substreams, so runs are reproducible bit-for-bit and
//! changing how one stage consumes randomness cannot shift another stage.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

/// Derives an independent RNG for (`root_seed`, `stream`). The same pair
/// always yields the same stream; distinct names yield unrelated streams.
pub fn substream(root_seed: u64, stream: &str) -> ChaCha12Rng {
    let mut hasher = Sha256::new();
    hasher.update(root_seed.to_le_bytes());
    hasher.update(stream.as_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha12Rng::from_seed(seed)
}

/// Standard normal draw via Box-Muller; two uniforms per call keeps the
/// stream layout independent of any library's rejection sampling.
pub fn normal(rng: &mut ChaCha12Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Fisher-Yates shuffle of indices 0..n, deterministic under the rng state.
pub fn shuffled_indices(rng: &mut ChaCha12Rng, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}
