//! Seeded random streams.
//!
//! Everything random in the crate draws from a ChaCha8 stream derived from a
//! user seed plus a stable tag, so per-file or per-epoch work can run in any
//! order (or in parallel) and still reproduce bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// 64-bit FNV-1a over raw bytes.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

pub fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Independent stream for `(seed, tag)`.
pub fn substream(seed: u64, tag: &str) -> Rng {
    Rng::seed_from_u64(splitmix(seed ^ fnv1a(tag.as_bytes())))
}

/// Independent stream for `(seed, index)`.
pub fn indexed(seed: u64, index: u64) -> Rng {
    Rng::seed_from_u64(splitmix(seed.wrapping_add(splitmix(index))))
}
