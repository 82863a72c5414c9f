//! Deterministic RNG stream derivation.
//!
//! Per-position randomness in the diffusion kernels is keyed by
//! (seed, step, position, lane) rather than drawn from one shared stream,
//! so results do not depend on iteration order and a run can resume from a
//! step counter alone.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Identifies one step of one seeded run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamKey {
    pub seed: u64,
    pub step: u64,
}

impl StreamKey {
    pub fn new(seed: u64, step: u64) -> Self {
        StreamKey { seed, step }
    }

    /// RNG for one (position, lane) slot of this step.
    pub fn rng_at(&self, position: u64, lane: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(mix4(self.seed, self.step, position, lane))
    }

    /// RNG for step-level draws (noise level, batch shaping).
    pub fn rng(&self, lane: u64) -> ChaCha8Rng {
        self.rng_at(u64::MAX, lane)
    }

    /// Derived key for sub-stream `index` (one sequence of a batch), so each
    /// sequence gets its own position/lane space within the step.
    pub fn substream(&self, index: u64) -> StreamKey {
        StreamKey {
            seed: mix4(self.seed, self.step, index, 0x5eb5),
            step: self.step,
        }
    }
}

/// SplitMix64-style avalanche of four words into one seed.
fn mix4(a: u64, b: u64, c: u64, d: u64) -> u64 {
    let mut h = 0x9e37_79b9_7f4a_7c15u64;
    for w in [a, b, c, d] {
        h ^= w.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = splitmix(h);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
