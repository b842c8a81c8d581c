//! Seeded, stream-splittable random number generation.
//!
//! Backed by ChaCha8 with its native 64-bit stream selector: a `(seed,
//! stream)` pair fully determines the draw sequence. Parallel work derives
//! one child per work item with [`Rng::derive`], so results do not depend on
//! scheduling.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl Rng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Child generator keyed by `(seed, stream, tag)`. Independent of how
    /// many values have already been drawn from `self`.
    pub fn derive(&self, tag: u64) -> Rng {
        let child_seed = splitmix64(self.seed ^ splitmix64(self.stream.wrapping_add(1)));
        Rng::new(child_seed, tag)
    }

    /// Uniform on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform on [lo, hi]; returns `lo` when the interval is degenerate.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        if hi <= lo {
            return lo;
        }
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform index in `0..n`. Panics if `n == 0`.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_and_stream_repeat() {
        let mut a = Rng::new(7, 3);
        let mut b = Rng::new(7, 3);
        for _ in 0..1000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn streams_differ() {
        let mut a = Rng::new(7, 0);
        let mut b = Rng::new(7, 1);
        let xs: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        assert_ne!(xs, ys);
    }

    #[test]
    fn derive_ignores_parent_position() {
        let parent = Rng::new(11, 2);
        let mut advanced = parent.clone();
        for _ in 0..17 {
            advanced.next_u64();
        }
        let mut c1 = parent.derive(5);
        let mut c2 = advanced.derive(5);
        assert_eq!(c1.next_u64(), c2.next_u64());
        let mut c3 = parent.derive(6);
        assert_ne!(parent.derive(5).next_u64(), c3.next_u64());
    }

    #[test]
    fn uniform_in_bounds() {
        let mut r = Rng::new(1, 1);
        for _ in 0..10_000 {
            let x = r.uniform_in(-0.5, 2.0);
            assert!((-0.5..=2.0).contains(&x));
        }
        assert_eq!(r.uniform_in(1.0, 1.0), 1.0);
    }
}
