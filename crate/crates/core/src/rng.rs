//! Deterministic derivation of independent random streams.
//!
//! Every stochastic routine takes its randomness from a stream derived from
//! `(master seed, domain tags...)` so that replicates can run on any number
//! of threads in any order and still produce bit-identical results. Paired
//! procedures share a stream by using the same tags (the first-stage stream
//! omits the procedure tag, giving common random numbers across procedures).

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain-separation tags for derived streams.
pub mod tag {
    pub const STAGE1: u64 = 1;
    pub const STAGE2_FIXED: u64 = 2;
    pub const STAGE2_ADAPTIVE: u64 = 3;
    pub const LIMIT_LAW_NORMAL: u64 = 4;
    pub const LIMIT_LAW_STAGE1: u64 = 5;
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes an ordered tag list into a single 64-bit stream identifier.
pub fn mix(master: u64, tags: &[u64]) -> u64 {
    let mut state = master;
    let mut acc = splitmix64(&mut state);
    for &t in tags {
        state ^= t;
        acc ^= splitmix64(&mut state).rotate_left(17);
    }
    acc
}

/// Derives an independent ChaCha stream from `(master, tags...)`.
pub fn derive_rng(master: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = mix(master, tags);
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}
