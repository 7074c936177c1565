//! Seeded random streams.
//!
//! Every random draw in the crate goes through [`stream`], which returns a
//! ChaCha8 generator keyed by the run seed and selected by a 64-bit stream
//! id. ChaCha is a counter-based cipher, so a `(seed, stream)` pair yields the
//! same sequence on every platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream ids used by the experiment protocol.
pub mod substream {
    pub const DATA_TRAIN: u64 = 1;
    pub const DATA_VAL: u64 = 2;
    pub const DATA_TEST: u64 = 3;
    pub const MASK_TRAIN: u64 = 10;
    pub const MASK_VAL: u64 = 11;
    pub const STAGE1: u64 = 20;
    pub const STAGE1_UNLABELED: u64 = 21;
    pub const PREDICT: u64 = 25;
    pub const STAGE2: u64 = 30;
    pub const FLIPS: u64 = 40;
    pub const THEORY: u64 = 50;
}

pub fn stream(seed: u64, stream_id: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}

/// Derives an independent child seed, used to give each trial or sweep cell
/// its own seed space.
pub fn child_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
