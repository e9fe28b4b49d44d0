//! Deterministic seed derivation. Every random stream is keyed by
//! `(run seed, label, index)`, so adding a new consumer never shifts the draws of
//! an existing one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ *b as u64).wrapping_mul(0x0000_0100_0000_01B3))
}

pub fn derive_seed(seed: u64, label: &str, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ fnv1a(label.as_bytes())) ^ splitmix64(index.wrapping_add(0x5851_F42D)))
}

/// Short stable hex digest, used to tag reports with the config that produced them.
pub fn digest(bytes: &[u8]) -> String {
    format!("{:016x}", splitmix64(fnv1a(bytes)))
}

pub fn stream(seed: u64, label: &str) -> Rng {
    indexed(seed, label, 0)
}

pub fn indexed(seed: u64, label: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, label, index))
}
