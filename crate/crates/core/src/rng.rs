//! Seeded random streams.
//!
//! Every stochastic step draws from its own stream keyed by the run seed and
//! a short tag path (task index, phase). Two runs that differ only in what
//! happens *between* streams (for instance whether weights are trained) still
//! see identical draws everywhere else.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub const INIT: u64 = 1;
pub const SCORES: u64 = 2;
pub const MASK_SHUFFLE: u64 = 3;
pub const WEIGHT_SHUFFLE: u64 = 4;
pub const KKT_PROBE: u64 = 5;
pub const PIN: u64 = 6;
pub const SPLIT: u64 = 7;
pub const SYNTH: u64 = 8;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Deterministic generator for `seed` and the tag path `tags`.
pub fn stream(seed: u64, tags: &[u64]) -> StreamRng {
    let mut key = splitmix64(seed);
    for &t in tags {
        key = splitmix64(key ^ splitmix64(t.wrapping_add(0x5851_F42D_4C95_7F2D)));
    }
    ChaCha8Rng::seed_from_u64(key)
}
