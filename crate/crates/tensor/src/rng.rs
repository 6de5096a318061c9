//! Seeded PCG64 streams.
//!
//! A master seed is expanded with `Pcg64::seed_from_u64`. Independent
//! consumers (dataset rendering, weight init, candidate sampling, ...) each
//! get their own stream by jumping that generator ahead `stream · 2¹⁰⁰`
//! steps, so any two streams are disjoint for all practical run lengths and
//! the derivation depends on nothing but integer arithmetic.

use rand::{RngCore, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rand_pcg::Pcg64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    inner: Pcg64,
}

impl Rng {
    pub fn seed(seed: u64) -> Self {
        Self {
            inner: Pcg64::seed_from_u64(seed),
        }
    }

    /// Stream `stream` derived from `seed`; stream 0 is the master stream itself.
    pub fn substream(seed: u64, stream: u64) -> Self {
        let mut inner = Pcg64::seed_from_u64(seed);
        inner.advance((stream as u128) << 100);
        Self { inner }
    }

    /// Child stream for item `index` of a collection, drawn deterministically
    /// from this generator's state without consuming it.
    pub fn child(&self, index: u64) -> Self {
        let mut inner = self.inner.clone();
        inner.advance(((index as u128) + 1) << 64);
        Self { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n` (multiply-shift reduction).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
