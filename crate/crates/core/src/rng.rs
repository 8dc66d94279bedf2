//! Seed derivation for reproducible, schedule-independent random streams.
//!
//! Every consumer of randomness gets its own ChaCha stream whose seed is
//! derived from a root seed and a path of integer tags (mixture index, run
//! index, MPC iteration, ...). Streams therefore do not depend on the order
//! in which parallel work items execute.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Tags that namespace the different consumers of a root seed.
pub mod tag {
    pub const COLLECT: u64 = 0x636f_6c6c;
    pub const FIT: u64 = 0x6669_7400;
    pub const BOUND: u64 = 0x626f_756e;
    pub const NOISE: u64 = 0x6e6f_6973;
    pub const CROSS_ENTROPY: u64 = 0x6365_6d00;
    pub const WINDOW: u64 = 0x7769_6e64;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a root seed with a path of tags into a child seed.
pub fn derive_seed(root: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(root), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn stream(root: u64, path: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(root, path))
}

/// FNV-1a accumulator over the raw bits of consumed random draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamHash(u64);

impl Default for StreamHash {
    fn default() -> Self {
        StreamHash(0xcbf2_9ce4_8422_2325)
    }
}

impl StreamHash {
    pub fn absorb(&mut self, value: f64) {
        for byte in value.to_bits().to_le_bytes() {
            self.0 ^= u64::from(byte);
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    pub fn value(&self) -> u64 {
        self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derived_streams_are_reproducible_and_distinct() {
        let a: u64 = stream(7, &[1, 2]).random();
        let b: u64 = stream(7, &[1, 2]).random();
        let c: u64 = stream(7, &[2, 1]).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(derive_seed(7, &[]), derive_seed(8, &[]));
    }

    #[test]
    fn stream_hash_tracks_order() {
        let mut h1 = StreamHash::default();
        let mut h2 = StreamHash::default();
        h1.absorb(1.0);
        h1.absorb(2.0);
        h2.absorb(2.0);
        h2.absorb(1.0);
        assert_ne!(h1, h2);
    }
}
