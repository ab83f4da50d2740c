//! Deterministic seed derivation.
//!
//! Every random stream in the crate is a ChaCha8 generator seeded from a root
//! seed mixed with a stream label, so results never depend on call order or
//! thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Combine a seed with a stream label into an independent sub-seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    mix64(mix64(seed) ^ stream.rotate_left(17) ^ 0x5851_F42D_4C95_7F2D)
}

/// Derive a sub-seed from a seed and a sequence of labels.
pub fn derive_seed_path(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(seed, |s, &p| derive_seed(s, p))
}

pub fn rng_from(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn stream(seed: u64, label: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, label))
}

/// Content hash of a float slice (bit patterns), used to key per-condition
/// Monte-Carlo streams so that identical conditions draw identical samples.
pub fn hash_f64s(values: &[f64]) -> u64 {
    let mut h = 0xCBF2_9CE4_8422_2325u64 ^ values.len() as u64;
    for v in values {
        h = mix64(h ^ v.to_bits());
    }
    h
}
