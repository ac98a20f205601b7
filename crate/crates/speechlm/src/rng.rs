//! Deterministic seed derivation.
//!
//! Every stochastic component takes a `ChaCha8Rng` seeded through
//! [`derive_seed`], so parallel and serial schedules of the same run agree
//! bit-for-bit: each unit of work (utterance, training step, init site) gets
//! its own stream derived from the master seed and a stable label.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; good avalanche, stable across platforms.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a master seed, a domain label and an index.
pub fn derive_seed(master: u64, label: &str, index: u64) -> u64 {
    let mut h = mix(master);
    for b in label.as_bytes() {
        h = mix(h ^ u64::from(*b));
    }
    mix(h ^ index)
}

/// RNG for one unit of work.
pub fn stream(master: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, label, index))
}
