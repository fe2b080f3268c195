//! Deterministic seed derivation. All generators are ChaCha8 seeded from
//! `u64` values derived here, so a run is reproducible from its base seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Name of the generator algorithm, recorded in run manifests.
pub const GENERATOR: &str = "chacha8 (rand_chacha 0.9), splitmix64 seed derivation";

pub mod stream {
    pub const PROJECTIONS: u64 = 1;
    pub const TRAIN_SAMPLES: u64 = 2;
    pub const TEST_SAMPLES: u64 = 3;
    pub const MISSING: u64 = 4;
    pub const MODEL_INIT: u64 = 5;
    pub const SHUFFLE: u64 = 6;
    pub const PRETRAIN: u64 = 7;
    pub const PROBE: u64 = 8;
    pub const SHAPLEY: u64 = 9;
    pub const SUBSET_CAP: u64 = 10;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream))
}
