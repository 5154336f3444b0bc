//! Named, per-purpose random streams.
//!
//! Every consumer of randomness derives its own ChaCha stream from the run
//! seed, a purpose label and an index, so adding a draw in one place never
//! shifts the numbers seen anywhere else.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a 64-bit seed for `(seed, purpose, index)`.
pub fn derive_seed(seed: u64, purpose: &str, index: u64) -> u64 {
    splitmix(splitmix(seed ^ fnv1a(purpose.as_bytes())) ^ splitmix(index.wrapping_add(1)))
}

pub fn stream(seed: u64, purpose: &str, index: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, purpose, index))
}
