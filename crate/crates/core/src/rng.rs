//! Deterministic stream derivation.
//!
//! Every random draw comes from a ChaCha generator seeded by mixing a base
//! seed with a path of integer labels, so results do not depend on the order
//! in which work items are scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub type StreamRng = ChaCha12Rng;

/// What a stream is used for inside one simulation replication.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Design = 1,
    Noise = 2,
    Bootstrap = 3,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a base seed with a sequence of labels into a single 64-bit seed.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix(base), |acc, &x| splitmix(acc ^ splitmix(x)))
}

pub fn stream(base: u64, path: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(base, path))
}

/// Stream for `(scenario, replication, purpose)`.
pub fn replication_stream(base: u64, scenario: u64, r: u64, purpose: Purpose) -> StreamRng {
    stream(base, &[scenario, r, purpose as u64])
}

/// Child stream `b` of a master seed, used for bootstrap replicates and
/// resampling draws.
pub fn child_stream(master: u64, b: u64) -> StreamRng {
    stream(master, &[0xB00_7, b])
}
