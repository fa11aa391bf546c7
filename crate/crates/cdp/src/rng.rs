//! Deterministic RNG stream derivation.
//!
//! Every stochastic phase draws from a stream keyed by (seed, phase, iteration,
//! batch). Streams depend only on those keys, never on thread scheduling, so a
//! parallel run and a serial run of the same configuration produce identical
//! samples.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) const PH_INIT: u64 = 1;
pub(crate) const PH_PARAMS: u64 = 2;
pub(crate) const PH_ASSIGN: u64 = 3;
pub(crate) const PH_SPLIT: u64 = 4;
pub(crate) const PH_MERGE: u64 = 5;
pub(crate) const PH_ZR: u64 = 6;
pub(crate) const PH_ZC: u64 = 7;
pub(crate) const PH_SIM: u64 = 8;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// ChaCha stream keyed by a base seed plus phase/iteration/batch tags.
pub(crate) fn derive_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = seed ^ 0x6A09_E667_F3BC_C909;
    let mut mixed = splitmix64(&mut state);
    for &t in tags {
        state ^= t.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        mixed = splitmix64(&mut state);
    }
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    // fold the last mix back in so a single-tag change flips the whole key
    key[0] ^= mixed as u8;
    ChaCha8Rng::from_seed(key)
}

/// Stable child seed for fanning one user seed out to independent components.
pub fn child_seed(seed: u64, tag: &str) -> u64 {
    let mut state = seed ^ 0xA5A5_A5A5_5A5A_5A5A;
    let mut out = splitmix64(&mut state);
    for b in tag.bytes() {
        state ^= u64::from(b).wrapping_mul(0x100_0000_01B3);
        out = splitmix64(&mut state);
    }
    out
}
