//! Keyed random streams.
//!
//! Every random draw in a run comes from a stream keyed by the run seed and a
//! short tuple of coordinates (purpose, epoch, sample, layer). Streams are
//! independent of evaluation order, so parallel or partial work draws the
//! same numbers as a sequential run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for; keeps streams with equal coordinates apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Dropout = 2,
    Shuffle = 3,
    Split = 4,
    Augment = 5,
    Probe = 6,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds the seed and coordinates into one 64-bit stream key.
pub fn derive_seed(seed: u64, purpose: Purpose, coords: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ splitmix64(purpose as u64));
    for &c in coords {
        h = splitmix64(h ^ splitmix64(c.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    h
}

pub fn stream(seed: u64, purpose: Purpose, coords: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, purpose, coords))
}
