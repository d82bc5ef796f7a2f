//! Reproducible random streams.
//!
//! Every stream is a ChaCha8 keystream. A stream is addressed by a 64-bit
//! seed plus a path of stream labels (layer index, refresh epoch, trial
//! index, ...). The path is folded into a single key with the SplitMix64
//! finalizer, and the key is expanded to a ChaCha seed with
//! `SeedableRng::seed_from_u64`. Both steps are fixed algorithms, so draws
//! are identical across runs, thread schedules and platforms.
//!
//! Conversions are deliberately simple so they can be reimplemented
//! elsewhere: uniforms take the top 53 bits of a `u64`, normals use the
//! cosine branch of Box-Muller on two uniforms, and Rademacher signs use the
//! top bit.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output function.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a stream path into a key.
pub fn derive_key(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix64(seed.wrapping_add(GOLDEN)), |acc, &p| mix64(acc ^ mix64(p.wrapping_add(GOLDEN))))
}

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Independent stream addressed by `path` under `seed`.
    pub fn keyed(seed: u64, path: &[u64]) -> Self {
        Self::new(derive_key(seed, path))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child stream of this generator's seed; does not advance `self`.
    pub fn child(&self, path: &[u64]) -> Self {
        Self::keyed(self.seed, path)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn rademacher(&mut self) -> f64 {
        if self.next_u64() >> 63 == 1 {
            1.0
        } else {
            -1.0
        }
    }

    /// Uniform integer in [0, n) by multiply-shift.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix_finalizer_vector() {
        // First three SplitMix64 outputs for state 0 (reference sequence).
        let outs: Vec<u64> = (1..=3u64).map(|i| mix64(i.wrapping_mul(GOLDEN))).collect();
        assert_eq!(outs, vec![0xE220_A839_7B1D_CDAF, 0x6E78_9E6A_A1B9_65F4, 0x06C4_5D18_8009_454F]);
    }

    #[test]
    fn same_seed_same_draws() {
        let mut a = Rng::keyed(7, &[1, 2]);
        let mut b = Rng::keyed(7, &[1, 2]);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = Rng::keyed(7, &[2, 1]);
        assert_ne!(Rng::keyed(7, &[1, 2]).next_u64(), c.next_u64());
    }

    #[test]
    fn uniform_range_and_normal_moments() {
        let mut r = Rng::new(3);
        let n = 200_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let u = r.uniform();
            assert!((0.0..1.0).contains(&u));
            let z = r.normal();
            s += z;
            s2 += z * z;
        }
        let mean = s / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn below_stays_in_range() {
        let mut r = Rng::new(11);
        let mut hits = [0usize; 5];
        for _ in 0..5000 {
            hits[r.below(5)] += 1;
        }
        assert!(hits.iter().all(|&h| h > 800));
    }
}
