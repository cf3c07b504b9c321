//! Deterministic random number generation.
//!
//! Every random decision in the crate flows from a [`Rng`], which wraps the
//! counter-based ChaCha8 stream cipher keyed by a 64-bit seed. The integer
//! stream is platform independent, and the float mappings below use only
//! bit shifts and IEEE add/multiply, so `uniform` and `normal` produce the
//! same bits everywhere too.
//!
//! Independent substreams are derived with [`derive_seed`], a SplitMix64
//! finalizer over (seed, tag). Modules pick fixed tags per purpose (corpus
//! cell, weight init, epoch shuffle, ...) so reordering unrelated work never
//! perturbs a stream.

use rand_chacha::ChaCha8Rng;
use rand_core::{Rng as _, SeedableRng};

/// Seeded deterministic generator.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    /// Generator keyed by `seed`.
    pub fn new(seed: u64) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform `f32` in `[0, 1)` with 24 bits of precision.
    pub fn uniform(&mut self) -> f32 {
        (self.next_u32() >> 8) as f32 * (1.0 / 16_777_216.0)
    }

    /// Uniform `f32` in `[lo, hi)`.
    pub fn range_f32(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.uniform()
    }

    /// Approximate standard normal via an Irwin-Hall 12-sum, scaled to
    /// `mean` and `std`. Uses only IEEE add/multiply, so the stream is
    /// platform independent; tails truncate at six sigma, which is plenty
    /// for weight initialization.
    pub fn normal(&mut self, mean: f32, std: f32) -> f32 {
        let mut acc = 0.0f32;
        for _ in 0..12 {
            acc += self.uniform();
        }
        mean + std * (acc - 6.0)
    }

    /// Uniform integer in `[0, n)` via Lemire's widening multiply.
    pub fn usize_below(&mut self, n: usize) -> usize {
        assert!(n > 0, "usize_below(0)");
        ((u128::from(self.next_u64()) * n as u128) >> 64) as usize
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.usize_below(i + 1);
            xs.swap(i, j);
        }
    }

    /// Draws `k` distinct indices from `[0, n)` via partial Fisher-Yates,
    /// returned in draw order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "sample_indices: k {k} > n {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.usize_below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

/// Derives an independent child seed from `(seed, tag)`.
///
/// SplitMix64 finalizer applied twice; used to key substreams so that, for
/// example, corpus generation and weight initialization never share a stream
/// even when built from the same experiment seed.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    mix(seed ^ mix(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
