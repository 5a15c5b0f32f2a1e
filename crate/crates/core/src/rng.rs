//! Seeded random streams.
//!
//! Every sampled quantity in an experiment comes from a named substream of a
//! single experiment seed. A substream is a xoshiro256++ generator whose state
//! is expanded by splitmix64 from `seed ^ fnv1a64(name)`, so any
//! implementation that follows the same recipe reproduces the same draws.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

pub const DATA: &str = "data";
pub const NOISE: &str = "noise";
pub const TRIPLES: &str = "triples";
pub const SHIFT: &str = "shift";
pub const CFG_W: &str = "cfg-w";
pub const PROJECTIONS: &str = "projections";
pub const INIT: &str = "init";
pub const TIMES: &str = "times";
pub const DROPOUT: &str = "dropout";
pub const EVAL: &str = "eval";
pub const DATASET: &str = "dataset";
pub const HELDOUT: &str = "heldout";

/// 64-bit FNV-1a hash of a stream name.
pub fn fnv1a64(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A xoshiro256++ generator with the sampling helpers used across the crate.
#[derive(Clone, Debug)]
pub struct Rng(Xoshiro256PlusPlus);

impl Rng {
    /// State words are the first four splitmix64 outputs of `seed`.
    pub fn seed_from_u64(seed: u64) -> Self {
        Rng(Xoshiro256PlusPlus::seed_from_u64(seed))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n` by multiply-shift.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        ((u128::from(self.next_u64()) * n as u128) >> 64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal via the cosine branch of Box-Muller (two uniforms per draw).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

/// Factory for the named substreams of one experiment seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Streams {
    seed: u64,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Streams { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, name: &str) -> Rng {
        Rng::seed_from_u64(self.seed ^ fnv1a64(name))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64("a"), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn xoshiro_state_from_splitmix() {
        // splitmix64(0) first output is 0xe220a8397b1dcdaf; the first
        // xoshiro256++ output is rotl(s0 + s3, 23) + s0.
        let mut sm = 0u64;
        let mut words = [0u64; 4];
        for w in &mut words {
            sm = sm.wrapping_add(0x9e37_79b9_7f4a_7c15);
            let mut z = sm;
            z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
            *w = z ^ (z >> 31);
        }
        assert_eq!(words[0], 0xe220_a839_7b1d_cdaf);
        let expected = words[0]
            .wrapping_add(words[3])
            .rotate_left(23)
            .wrapping_add(words[0]);
        assert_eq!(Rng::seed_from_u64(0).next_u64(), expected);
    }

    #[test]
    fn streams_are_independent_and_reproducible() {
        let s = Streams::new(7);
        let a: Vec<u64> = (0..4).map({
            let mut r = s.stream(DATA);
            move |_| r.next_u64()
        }).collect();
        let b: Vec<u64> = (0..4).map({
            let mut r = s.stream(DATA);
            move |_| r.next_u64()
        }).collect();
        let c = s.stream(NOISE).next_u64();
        assert_eq!(a, b);
        assert_ne!(a[0], c);
    }

    #[test]
    fn below_stays_in_range() {
        let mut r = Rng::seed_from_u64(1);
        let mut seen = [0usize; 3];
        for _ in 0..3000 {
            seen[r.below(3)] += 1;
        }
        assert!(seen.iter().all(|&c| c > 900));
    }

    #[test]
    fn normal_moments() {
        let mut r = Rng::seed_from_u64(3);
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| r.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }
}
