//! Seed derivation. Every random stream in the pipeline comes from the one
//! top-level seed through [`derive`], keyed by a stage constant and an index.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STAGE_INJECTION: u64 = 1;
pub const STAGE_DETECTION: u64 = 2;
pub const STAGE_SPREAD: u64 = 3;
pub const STAGE_MATRIX: u64 = 4;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(seed: u64, stage: u64, index: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ stage.wrapping_mul(0xA24B_AED4_963E_E407)) ^ index)
}

pub fn rng(seed: u64, stage: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, stage, index))
}
