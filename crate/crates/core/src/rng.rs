//! Deterministic random streams.
//!
//! Every random draw in the toolkit comes from [`DetRng`]: ChaCha8 keyed by
//! `rand_core`'s `seed_from_u64` expansion of a 64-bit seed, with a 64-bit
//! stream id selecting an independent substream (`set_stream`). Conversions
//! to floats are done here rather than through `rand` distributions so a
//! reimplementation only needs ChaCha8 plus the formulas below:
//!
//! * `uniform()`   = `(next_u64() >> 11) * 2^-53`, in `[0, 1)`
//! * `below(n)`    = `(next_u64() as u128 * n) >> 64`
//! * `normal()`    = Box–Muller on two uniforms, cosine branch only
//!   (`u1` mapped to `(0, 1]` as `1 - uniform()`).

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Stream ids used by the generator and the OCR simulator. Keeping them in
/// one place guarantees streams never collide.
pub mod streams {
    pub const LAYOUT: u64 = 1;
    pub const BEND: u64 = 2;
    pub const CAMERA: u64 = 3;
    pub const BACKGROUND: u64 = 4;
    /// Fold `i` draws from `FOLD_BASE + i`.
    pub const FOLD_BASE: u64 = 1 << 16;
    /// OCR word `i` draws from `OCR_WORD_BASE + i`.
    pub const OCR_WORD_BASE: u64 = 1 << 32;
    pub const NOISE: u64 = 5;
    pub const PROBE: u64 = 6;
}

#[derive(Debug, Clone)]
pub struct DetRng {
    inner: ChaCha8Rng,
}

impl DetRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Uniform integer in `lo..=hi`.
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        debug_assert!(lo <= hi);
        lo + self.below((hi - lo + 1) as u64) as usize
    }

    /// Standard normal deviate.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn sign(&mut self) -> f64 {
        if self.next_u64() & 1 == 0 {
            1.0
        } else {
            -1.0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_and_stream_repeat() {
        let mut a = DetRng::new(7, 3);
        let mut b = DetRng::new(7, 3);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn streams_differ() {
        let mut a = DetRng::new(7, 3);
        let mut b = DetRng::new(7, 4);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut r = DetRng::new(1, 0);
        for _ in 0..10_000 {
            let u = r.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn normal_moments() {
        let mut r = DetRng::new(11, 0);
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| r.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }
}
