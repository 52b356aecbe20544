//! Seed derivation. Every random stream in the crate is keyed by a tuple of
//! integers mixed through splitmix64, so streams are reproducible and
//! independent of generation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    let mut s = splitmix64(master);
    for &p in parts {
        s = splitmix64(s ^ splitmix64(p.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    s
}

pub fn stream(master: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, parts))
}

/// Stable 64-bit key for a string id (FNV-1a).
pub fn key_of(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}
