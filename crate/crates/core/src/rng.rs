//! Deterministic random source.
//!
//! Every random draw in the toolkit goes through [`Prng`], a thin wrapper over
//! xoshiro256** whose 256-bit state is expanded from a `u64` seed with
//! SplitMix64 (`rand_xoshiro`'s `seed_from_u64`). Derived draws are fixed here
//! so outputs depend only on the seed:
//!
//! * `uniform()` is `(next_u64() >> 11) * 2^-53`, in `[0, 1)`.
//! * `normal()` is Box-Muller on two uniforms, keeping the cosine branch.
//! * `below(n)` is the high word of `next_u64() * n` (128-bit product).
//! * `permutation(n)` is a descending Fisher-Yates shuffle using `below`.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

#[derive(Clone, Debug)]
pub struct Prng {
    inner: Xoshiro256StarStar,
}

impl Prng {
    pub fn new(seed: u64) -> Self {
        Prng {
            inner: Xoshiro256StarStar::seed_from_u64(seed),
        }
    }

    /// Child stream for a labelled sub-task. Independent of how many draws the
    /// parent has made.
    pub fn derive(seed: u64, label: u64) -> Self {
        Prng::new(splitmix(seed ^ splitmix(label)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        // 1 - u lies in (0, 1], so the log is finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn sign(&mut self) -> f64 {
        if self.next_u64() >> 63 == 1 {
            -1.0
        } else {
            1.0
        }
    }

    pub fn bit(&mut self) -> bool {
        self.next_u64() >> 63 == 1
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            p.swap(i, j);
        }
        p
    }

    /// `k` distinct indices from `0..n`, in draw order.
    pub fn choose(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut p = self.permutation(n);
        p.truncate(k.min(n));
        p
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Prng::new(7);
        let mut b = Prng::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn permutation_is_bijection() {
        let mut r = Prng::new(3);
        for n in [0, 1, 2, 17, 100] {
            let mut p = r.permutation(n);
            p.sort_unstable();
            assert_eq!(p, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn uniform_range() {
        let mut r = Prng::new(11);
        for _ in 0..10_000 {
            let u = r.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn normal_moments() {
        let mut r = Prng::new(5);
        let xs = r.normals(200_000);
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 0.01, "{mean}");
        assert!((var - 1.0).abs() < 0.02, "{var}");
    }

    #[test]
    fn derived_streams_differ() {
        let mut a = Prng::derive(1, 0);
        let mut b = Prng::derive(1, 1);
        assert_ne!(a.next_u64(), b.next_u64());
    }
}
