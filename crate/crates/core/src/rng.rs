//! Deterministic random substreams.
//!
//! All randomized routines in this crate draw from [`ChaCha8Rng`] streams
//! derived from one master seed plus a structured path of indices (module
//! lane, grid index, draw index, …). Work items own disjoint streams, so
//! parallel studies produce identical results for a fixed seed regardless of
//! worker count, and re-running any subset of the work reproduces it exactly.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Lane constants keeping independent subsystems on disjoint streams.
pub mod lane {
    pub const VARIANCE_STUDY: u64 = 1;
    pub const LOSS_DIST: u64 = 2;
    pub const TRAIN_INIT: u64 = 3;
    pub const TRAIN_BATCH: u64 = 4;
    pub const SAMPLER: u64 = 5;
    pub const EVAL: u64 = 6;
    pub const CHECKS: u64 = 7;
}

/// SplitMix64 finalizer; a well-mixed 64 -> 64 bijection.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent generator from `(seed, path)`.
///
/// The path words are absorbed into a 256-bit ChaCha key through a SplitMix64
/// chain, so distinct paths yield independent streams and the derivation is
/// stable across platforms and releases.
pub fn substream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    let mut state = splitmix(seed ^ 0x5bf0_3635_dee9_39e1);
    for &word in path {
        state = splitmix(state ^ splitmix(word));
    }
    let mut key = [0u8; 32];
    for (i, chunk) in key.chunks_exact_mut(8).enumerate() {
        state = splitmix(state.wrapping_add(i as u64 + 1));
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn substream_is_deterministic() {
        let mut a = substream(42, &[lane::VARIANCE_STUDY, 3, 17]);
        let mut b = substream(42, &[lane::VARIANCE_STUDY, 3, 17]);
        let xs: Vec<f64> = (0..8).map(|_| a.random()).collect();
        let ys: Vec<f64> = (0..8).map(|_| b.random()).collect();
        assert_eq!(xs, ys);
    }

    #[test]
    fn distinct_paths_decorrelate() {
        let mut a = substream(42, &[lane::VARIANCE_STUDY, 3, 17]);
        let mut b = substream(42, &[lane::VARIANCE_STUDY, 3, 18]);
        let mut c = substream(43, &[lane::VARIANCE_STUDY, 3, 17]);
        let x: u64 = a.random();
        assert_ne!(x, b.random());
        assert_ne!(x, c.random());
    }

    #[test]
    fn path_structure_matters() {
        // [1, 2] and [2, 1] must not collide: absorption is order-sensitive.
        let mut a = substream(0, &[1, 2]);
        let mut b = substream(0, &[2, 1]);
        assert_ne!(a.random::<u64>(), b.random::<u64>());
    }
}
