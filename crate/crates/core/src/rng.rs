//! Keyed random streams.
//!
//! Every random draw in the engine comes from a stream identified by
//! `(global seed, purpose tag, index)`. Streams are independent of the order
//! in which they are requested, so worker count and scheduling never change
//! results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    tag.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Stream for `(seed, tag, index)`.
pub fn stream(seed: u64, tag: &str, index: u64) -> Rng {
    let key = splitmix64(splitmix64(seed) ^ fnv1a(tag));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(index);
    rng
}

/// Two-level index helper, e.g. `(epoch, sample)`.
pub fn stream2(seed: u64, tag: &str, outer: u64, inner: u64) -> Rng {
    stream(seed, tag, splitmix64(outer).wrapping_add(inner))
}
