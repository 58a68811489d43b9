//! Deterministic seed derivation.
//!
//! One global seed drives every random stream in the engine. Each subsystem
//! draws from `seed ^ tag(purpose)` so streams never collide or alias when
//! the same seed feeds the simulator, parameter init, and batch shuffling.
//! Tags are FNV-1a hashes of a purpose name, computed at compile time.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

/// FNV-1a over the purpose name; stable across builds and platforms.
const fn tag(name: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut i = 0;
    while i < name.len() {
        h ^= name[i] as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
        i += 1;
    }
    h
}

/// Synthetic panel generation (inflow noise).
pub const SIMULATE: u64 = tag(b"simulate");
/// Model parameter initialization.
pub const PARAM_INIT: u64 = tag(b"param-init");
/// Mini-batch shuffling (combined with the epoch index).
pub const SHUFFLE: u64 = tag(b"batch-shuffle");

/// RNG for a purpose-tagged stream of the global seed.
pub fn rng(seed: u64, purpose: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed ^ purpose)
}

/// Per-epoch shuffle RNG: the shuffle stream advanced by epoch index.
pub fn epoch_rng(seed: u64, epoch: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64((seed ^ SHUFFLE).wrapping_add(epoch))
}
