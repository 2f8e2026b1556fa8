//! Seeded randomness helpers.
//!
//! All stochastic choices in the crate (weight init, dataset synthesis,
//! shot sampling, shuffling) go through a [`ChaCha8Rng`] seeded from a
//! `u64`, so identical seeds reproduce identical runs bit for bit.

use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Create a generator for (`base` seed, logical `stream`).
///
/// Distinct streams decorrelate the uses of a single run seed (model init
/// vs. shot sampling vs. batch shuffling) without the caller having to
/// invent unrelated seed constants.
pub fn stream_rng(base: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(base ^ splitmix64(stream)))
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Uniform f64 in [0, 1) using the top 53 bits of a draw.
pub fn uniform_f64(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Vector of uniform [0, 1) samples.
pub fn uniform_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| uniform_f64(rng)).collect()
}

/// Standard normal sample via Box-Muller.
pub fn normal_f64(rng: &mut ChaCha8Rng) -> f64 {
    // Avoid ln(0) by shifting u1 away from zero.
    let u1 = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    let u1 = u1.max(f64::MIN_POSITIVE);
    let u2 = uniform_f64(rng);
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * core::f64::consts::PI * u2)
}

/// Vector of N(0, sigma^2) samples.
pub fn normal_vec(rng: &mut ChaCha8Rng, len: usize, sigma: f64) -> Vec<f64> {
    (0..len).map(|_| normal_f64(rng) * sigma).collect()
}

/// Uniform index in [0, n). `n` must be nonzero.
pub fn index_below(rng: &mut ChaCha8Rng, n: usize) -> usize {
    // Modulo bias is negligible for the desk-scale n used here (< 2^20).
    (rng.next_u64() % n as u64) as usize
}

/// In-place Fisher-Yates shuffle.
pub fn shuffle<T>(rng: &mut ChaCha8Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = index_below(rng, i + 1);
        items.swap(i, j);
    }
}

/// Draw `count` distinct indices from [0, n), in ascending order.
pub fn sample_indices(rng: &mut ChaCha8Rng, n: usize, count: usize) -> Vec<usize> {
    debug_assert!(count <= n);
    let mut pool: Vec<usize> = (0..n).collect();
    // Partial Fisher-Yates: the first `count` slots end up uniform.
    for i in 0..count {
        let j = i + index_below(rng, n - i);
        pool.swap(i, j);
    }
    let mut picked: Vec<usize> = pool[..count].to_vec();
    picked.sort_unstable();
    picked
}
