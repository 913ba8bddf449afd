//! Deterministic seed derivation.
//!
//! Every random stream in the crate is seeded from a user seed mixed with the
//! identifiers of the unit of work (subject, landmark, model, replicate). The
//! mixing is order-sensitive and platform independent, so parallel execution
//! order never changes results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a base seed with a sequence of tags into a new seed.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

/// Tag for a real number (landmark or window), based on its bit pattern.
pub fn real_tag(x: f64) -> u64 {
    // -0.0 and 0.0 must map to the same stream.
    if x == 0.0 {
        0
    } else {
        x.to_bits()
    }
}

/// Tag for a string identifier (model ids, method names).
pub fn str_tag(s: &str) -> u64 {
    s.bytes().fold(0xCBF2_9CE4_8422_2325_u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01B3))
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
