//! Seed derivation. Every random stream in a run is keyed off one base seed
//! so a manifest's seeds reproduce the whole run.

/// SplitMix64 finaliser.
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed number `index` of the named `stream` under `base`.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    mix64(mix64(base ^ mix64(stream)).wrapping_add(index))
}

/// Stream tags used across the crate.
pub mod stream {
    pub const COLLECT: u64 = 1;
    pub const VAE: u64 = 2;
    pub const RNN: u64 = 3;
    pub const CMA: u64 = 4;
    pub const GENERATION: u64 = 5;
    pub const HELD_OUT: u64 = 6;
    pub const EVALUATE: u64 = 7;
    pub const ENCODE: u64 = 8;
    pub const INIT: u64 = 9;
}
