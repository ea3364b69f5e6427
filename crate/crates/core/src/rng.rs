//! Seed derivation for reproducible, parallelizable event processing.
//!
//! Per-event generators are derived from a campaign seed with splitmix64:
//! `event_seed(campaign_seed, k)` hashes the pair `(campaign_seed, k)` through
//! two splitmix64 rounds. Events can therefore be simulated in any order or in
//! parallel while producing bit-identical results.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One splitmix64 round (Steele, Lea, Flood 2014).
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive the seed for stream `index` from a campaign-level seed.
pub fn derive_seed(campaign_seed: u64, index: u64) -> u64 {
    let mut state = campaign_seed;
    let a = splitmix64(&mut state);
    let mut state = a ^ index;
    splitmix64(&mut state)
}

/// Deterministic, portable generator for a derived stream.
pub fn stream_rng(campaign_seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(campaign_seed, index))
}
