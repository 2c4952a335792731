//! Seed derivation.
//!
//! Every random stream in the crate is derived from one master seed, a
//! component name and an index: `splitmix64(splitmix64(master ^ fnv1a(name)) ^ mix(index))`.
//! The derivation is platform independent, so a stream can be rebuilt anywhere
//! (e.g. regenerating Brownian increments for a time-shifted driver).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// 64-bit FNV-1a hash of a component name.
pub fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, component: &str, index: u64) -> u64 {
    let base = splitmix64(master ^ fnv1a(component));
    splitmix64(base ^ index.wrapping_mul(0xd1b5_4a32_d192_ed03))
}

/// Independent generator for `(component, index)` under `master`.
pub fn stream(master: u64, component: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, component, index))
}
