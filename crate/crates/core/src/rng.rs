//! Counter-based randomness.
//!
//! Every random decision in the crate is a pure function of a seed and a
//! small tuple of counters, so results never depend on iteration order or
//! thread count. The mixer is the SplitMix64 finaliser applied once per input
//! word.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
pub fn hash2(seed: u64, a: u64) -> u64 {
    mix64(mix64(seed.wrapping_add(GOLDEN)).wrapping_add(a.wrapping_mul(GOLDEN) ^ 0x2545_F491_4F6C_DD1D))
}

#[inline]
pub fn hash3(seed: u64, a: u64, b: u64) -> u64 {
    mix64(hash2(seed, a).wrapping_add(b.wrapping_mul(0xD6E8_FEB8_6659_FD93)) ^ GOLDEN)
}

/// Top 53 bits of `h` as a uniform double in `[0, 1)`.
#[inline]
pub fn unit_f64(h: u64) -> f64 {
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Bernoulli(1 - p) keep decision for cell `(r, c)` under `seed`.
#[inline]
pub fn keep(seed: u64, r: u64, c: u64, p: f64) -> bool {
    unit_f64(hash3(seed, r, c)) >= p
}

/// Derives the per-step, per-layer mask seed from a base seed.
#[inline]
pub fn mix_seed(seed: u64, step: u64, layer: u64) -> u64 {
    hash3(seed, step, layer)
}
