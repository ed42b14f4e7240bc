//! Deterministic substream derivation from one 64-bit master seed.
//!
//! Every random quantity in a run is drawn from a generator keyed by a path of
//! integers (purpose tag, realization, step, node, ...), so the value does not
//! depend on how many draws other components consumed before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TAG_SCENARIO: u64 = 1;
pub const TAG_NOISE: u64 = 2;
pub const TAG_INIT: u64 = 3;
pub const TAG_MULTISTART: u64 = 4;
pub const TAG_POLICY: u64 = 5;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(master), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(master: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, path))
}
