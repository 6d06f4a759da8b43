//! Deterministic, splittable random streams.
//!
//! Every stochastic operation in the engine draws from a [`StreamKey`]: a
//! root seed plus a path of integer tags. Child streams are derived by
//! hashing the seed and path with SHA-256 and seeding a ChaCha8 generator
//! from the digest, so any (seed, path) pair names the same stream on any
//! platform and independently of scheduling or thread count.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Purpose tags for derived streams. Keeping them in one place avoids
/// accidental collisions between unrelated consumers of the same seed.
pub mod tags {
    pub const TIME_DRAW: u64 = 0x01;
    pub const FLOW_NOISE: u64 = 0x02;
    pub const UNCOND_COIN: u64 = 0x03;
    pub const DROPOUT: u64 = 0x04;
    pub const SAMPLER_CATEGORICAL: u64 = 0x05;
    pub const SAMPLER_SENDER: u64 = 0x06;
    pub const SHUFFLE: u64 = 0x07;
    pub const INIT: u64 = 0x08;
    pub const ENTROPY_MC: u64 = 0x09;
    pub const SPLIT: u64 = 0x0a;
}

/// A named point in the stream tree. Cloning is cheap; `child` extends the
/// path without mutating the parent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamKey {
    seed: u64,
    path: Vec<u64>,
}

impl StreamKey {
    pub fn new(seed: u64) -> Self {
        StreamKey { seed, path: Vec::new() }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn child(&self, tag: u64) -> StreamKey {
        let mut path = self.path.clone();
        path.push(tag);
        StreamKey { seed: self.seed, path }
    }

    /// Materialize the stream as a concrete generator.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut hasher = Sha256::new();
        hasher.update(b"bfn-stream-v1");
        hasher.update(self.seed.to_le_bytes());
        for tag in &self.path {
            hasher.update(tag.to_le_bytes());
        }
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(seed)
    }
}

/// Fill `out` with i.i.d. standard normal draws.
pub fn fill_standard_normal(rng: &mut ChaCha8Rng, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = rng.sample::<f64, _>(rand_distr::StandardNormal);
    }
}

/// Draw an index from an explicit categorical distribution by inverse CDF.
/// Probabilities are assumed non-negative; the last bucket absorbs any
/// floating-point slack in the total mass.
pub fn sample_categorical(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    debug_assert!(!probs.is_empty());
    let total: f64 = probs.iter().sum();
    let u = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}
