//! Counter-based seeding: every random stream is derived from the run seed
//! plus a tuple of integers naming its purpose, so results never depend on
//! the order in which streams are consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream tags used to keep derived seeds apart.
pub mod stream {
    pub const IDENTITY: u64 = 1;
    pub const SAMPLE: u64 = 2;
    pub const CAMERA: u64 = 3;
    pub const ENCODER_INIT: u64 = 10;
    pub const TEXT_INIT: u64 = 11;
    pub const PROMPT_INIT: u64 = 12;
    pub const HEAD_INIT: u64 = 13;
    pub const STUDENT_INIT: u64 = 14;
    pub const STAGE1: u64 = 20;
    pub const STAGE2: u64 = 21;
    pub const PROBE: u64 = 30;
    pub const PALETTE: u64 = 40;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_for(seed: u64, parts: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, parts))
}
