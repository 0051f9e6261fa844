//! Seed-derived random streams.
//!
//! A run owns one 64-bit seed. Every stochastic consumer (view sampling,
//! timesteps, diffusion noise, extension sampling) draws from a stream keyed
//! by a short tag path, so the draws of one stage never depend on how many
//! numbers another stage consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream tags used by the pipeline.
pub mod tag {
    pub const STAGE: u64 = 0x5354_4147;
    pub const INIT: u64 = 0x494e_4954;
    pub const SEGMENT: u64 = 0x5345_474d;
    pub const EXTEND: u64 = 0x4558_5444;
    pub const GUIDANCE: u64 = 0x4755_4944;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedStream {
    seed: u64,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derives a child stream; `derive(&[a]).derive(&[b])` equals `derive(&[a, b])`.
    pub fn derive(&self, tags: &[u64]) -> SeedStream {
        let mut state = self.seed;
        for &t in tags {
            let mut s = state ^ t.rotate_left(17);
            state = splitmix64(&mut s) ^ splitmix64(&mut s).rotate_left(29);
        }
        SeedStream { seed: state }
    }

    pub fn rng(&self, tags: &[u64]) -> StreamRng {
        let mut state = self.derive(tags).seed;
        let mut key = [0u8; 32];
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        ChaCha8Rng::from_seed(key)
    }
}
