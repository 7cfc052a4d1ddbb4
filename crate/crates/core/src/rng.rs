//! Seeded random-number streams.
//!
//! Every source of randomness in the crate derives from one master seed via
//! `stream(master, tag, index)`, so any piece of work (an episode, a dropout
//! mask, a parameter init) is reproducible in isolation.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// FNV-1a 64-bit hash. Stable across platforms and releases, unlike
/// `std::collections::hash_map::DefaultHasher`.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive an independent RNG stream from `(master, tag, index)`.
pub fn stream(master: u64, tag: &str, index: u64) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    seed[0..8].copy_from_slice(&master.to_le_bytes());
    seed[8..16].copy_from_slice(&fnv1a64(tag.as_bytes()).to_le_bytes());
    seed[16..24].copy_from_slice(&index.to_le_bytes());
    seed[24..32].copy_from_slice(&0x9e37_79b9_7f4a_7c15u64.to_le_bytes());
    ChaCha8Rng::from_seed(seed)
}

/// Uniform sample in `[0, 1)` with 53 bits of precision.
pub fn uniform_f64(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform sample in `[lo, hi)`.
pub fn uniform_range(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * uniform_f64(rng)
}

/// Standard normal sample via Box-Muller.
pub fn normal_f64(rng: &mut ChaCha8Rng) -> f64 {
    // u1 in (0, 1] so the log is finite.
    let u1 = 1.0 - uniform_f64(rng);
    let u2 = uniform_f64(rng);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Uniform integer in `[0, n)`. `n` must be nonzero.
pub fn gen_index(rng: &mut ChaCha8Rng, n: usize) -> usize {
    debug_assert!(n > 0);
    (rng.next_u64() % n as u64) as usize
}

/// Sample `k` distinct indices from `0..n` without replacement
/// (partial Fisher-Yates; order of the draw is preserved).
pub fn sample_distinct(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    assert!(k <= n, "cannot draw {k} distinct items from {n}");
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + gen_index(rng, n - i);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible() {
        let mut a = stream(7, "episode", 3);
        let mut b = stream(7, "episode", 3);
        for _ in 0..16 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn streams_differ_by_tag_and_index() {
        let mut a = stream(7, "episode", 3);
        let mut b = stream(7, "episode", 4);
        let mut c = stream(7, "dropout", 3);
        let (x, y, z) = (a.next_u64(), b.next_u64(), c.next_u64());
        assert_ne!(x, y);
        assert_ne!(x, z);
    }

    #[test]
    fn sample_distinct_is_a_subset_without_repeats() {
        let mut rng = stream(1, "t", 0);
        for _ in 0..50 {
            let s = sample_distinct(&mut rng, 10, 6);
            let mut sorted = s.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), 6);
            assert!(s.iter().all(|&i| i < 10));
        }
    }

    #[test]
    fn normal_has_roughly_unit_moments() {
        let mut rng = stream(2, "n", 0);
        let n = 20_000;
        let samples: Vec<f64> = (0..n).map(|_| normal_f64(&mut rng)).collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}
