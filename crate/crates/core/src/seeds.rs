//! Named sub-seeds derived from one base seed.
//!
//! `derive_seed(base, stream, index)` hashes the stream name with FNV-1a,
//! then mixes `base`, that hash and `index` through SplitMix64 finalisers:
//!
//! ```text
//! h = splitmix(splitmix(base ^ fnv1a(stream)) ^ index)
//! ```
//!
//! Streams used by the harness: `"data"`, `"split"`, `"test_grid"`,
//! `"test_labels"`, `"calib"`. A replication only ever touches seeds built
//! from its own index, so replications are independent of execution order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 output function.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

pub fn derive_seed(base: u64, stream: &str, index: u64) -> u64 {
    splitmix64(splitmix64(base ^ fnv1a(stream)) ^ index)
}

pub fn rng_for(base: u64, stream: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stream, index))
}
