//! Deterministic random streams.
//!
//! Every random draw in the crate comes from a xoshiro256++ stream whose
//! state is a pure function of a base seed and a short path of integers such as
//! `(purpose, step, chain)`. Two computations that ask for the same path get
//! the same numbers regardless of thread scheduling or evaluation order.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

/// The RNG type threaded through kernels and samplers.
pub type StreamRng = Xoshiro256PlusPlus;

/// Purpose tags keep streams for different jobs disjoint even when the
/// remaining path components coincide.
pub mod tag {
    pub const DATA: u64 = 1;
    pub const CD_STEP: u64 = 2;
    pub const REPLICATE: u64 = 3;
    pub const HITTING: u64 = 4;
    pub const SPECTRAL: u64 = 5;
    pub const GRADIENT_FIELD: u64 = 6;
    pub const SWEEP: u64 = 7;
    pub const TEST: u64 = 99;
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a 64-bit child seed from `seed` and a path.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    let mut state = seed;
    let mut acc = splitmix64(&mut state);
    for &p in path {
        state ^= p.wrapping_mul(0xD6E8_FEB8_6659_FD93).rotate_left(17) ^ acc;
        acc = splitmix64(&mut state);
    }
    acc
}

/// Open the stream identified by `seed` and `path`.
pub fn stream(seed: u64, path: &[u64]) -> StreamRng {
    let mut state = derive_seed(seed, path);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    Xoshiro256PlusPlus::from_seed(key)
}
