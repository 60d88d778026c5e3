//! Deterministic seed derivation. Every random stream in a run is keyed by
//! the run seed plus a small tuple describing what it is used for, so runs
//! can be replayed or resumed at any step without storing RNG state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STREAM_INIT: u64 = 1;
pub const STREAM_ALPHA_INIT: u64 = 2;
pub const STREAM_ORDER: u64 = 3;
pub const STREAM_MASK_TRAIN: u64 = 4;
pub const STREAM_MASK_VAL: u64 = 5;
pub const STREAM_SCORE_MASK: u64 = 6;
pub const STREAM_AUGMENT: u64 = 7;
pub const STREAM_SAMPLE: u64 = 8;
pub const STREAM_PERMUTATION: u64 = 9;
pub const STREAM_DROP_PATH: u64 = 10;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, stream: &[u64]) -> u64 {
    stream
        .iter()
        .fold(splitmix64(base), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

pub fn rng_for(base: u64, stream: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stream))
}
