//! Root seed → named deterministic sub-streams.
//!
//! Every random decision in a run draws from a stream derived from the run's
//! root seed and a stable name (`"probe"`, `"fuzzer"`, `"dimm"`, ...), so
//! changing how one module consumes randomness never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// splitmix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over the name, folded into the seed.
pub fn derive(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    mix64(seed ^ mix64(h))
}

pub fn derive_index(seed: u64, name: &str, index: u64) -> u64 {
    mix64(derive(seed, name) ^ mix64(index.wrapping_add(1)))
}

pub fn stream(seed: u64, name: &str) -> SimRng {
    SimRng::seed_from_u64(derive(seed, name))
}

pub fn indexed_stream(seed: u64, name: &str, index: u64) -> SimRng {
    SimRng::seed_from_u64(derive_index(seed, name, index))
}

/// Uniform value in [0, 1) from a hash; used for stateless per-item draws.
#[inline]
pub fn unit_from_hash(h: u64) -> f64 {
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
