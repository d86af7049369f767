//! Counter-based splittable random numbers.
//!
//! The n-th draw of a stream is `mix(key(seed, stream) + n·γ)`, the SplitMix64
//! construction, so any draw can be recomputed from `(seed, stream, n)` alone.
//! Splitting derives a new stream id; the parent counter is untouched.

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Rng {
    seed: u64,
    stream: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::from_state(seed, 0, 0)
    }

    pub fn from_state(seed: u64, stream: u64, counter: u64) -> Self {
        Self {
            seed,
            stream,
            counter,
        }
    }

    /// `(seed, stream, counter)`.
    pub fn state(&self) -> (u64, u64, u64) {
        (self.seed, self.stream, self.counter)
    }

    /// Child stream `index`. Children of the same parent with different
    /// indices, and the parent itself, produce unrelated sequences.
    pub fn split(&self, index: u64) -> Rng {
        let child = mix64(self.stream ^ mix64(index.wrapping_add(1).wrapping_mul(GOLDEN)))
            .wrapping_add(GOLDEN);
        Rng::from_state(self.seed, child, 0)
    }

    /// Draw number `n` of this stream, independent of the current counter.
    pub fn draw_at(&self, n: u64) -> u64 {
        let key = mix64(self.seed ^ 0x6a09_e667_f3bc_c908) ^ mix64(self.stream.wrapping_mul(GOLDEN));
        mix64(key.wrapping_add(n.wrapping_add(1).wrapping_mul(GOLDEN)))
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(self)
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Uniform integer in `0..n` (rejection sampling, no modulo bias).
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let x = self.next_u64();
            if x < zone {
                return x % n;
            }
        }
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        let v = self.draw_at(self.counter);
        self.counter += 1;
        v
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let bytes = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn same_seed_same_sequence() {
        let mut a = Rng::new(7);
        let mut b = Rng::new(7);
        for _ in 0..1000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = Rng::new(8);
        assert_ne!(Rng::new(7).next_u64(), c.next_u64());
    }

    #[test]
    fn draws_are_pure_functions_of_position() {
        let mut r = Rng::new(3).split(11);
        let head: Vec<u64> = (0..10).map(|_| r.next_u64()).collect();
        let probe = Rng::new(3).split(11);
        for (n, v) in head.iter().enumerate() {
            assert_eq!(probe.draw_at(n as u64), *v);
        }
        let (seed, stream, counter) = r.state();
        let mut resumed = Rng::from_state(seed, stream, counter);
        assert_eq!(resumed.next_u64(), probe.draw_at(10));
    }

    #[test]
    fn split_streams_are_disjoint_over_a_million_draws() {
        let mut parent = Rng::new(42);
        let mut child = parent.split(0);
        let mut sibling = parent.split(1);
        let seen: HashSet<u64> = (0..1_000_000).map(|_| parent.next_u64()).collect();
        for _ in 0..1_000_000 {
            assert!(!seen.contains(&child.next_u64()));
            assert!(!seen.contains(&sibling.next_u64()));
        }
    }

    #[test]
    fn uniform_and_normal_moments() {
        let mut r = Rng::new(1);
        let n = 200_000;
        let u: f64 = (0..n).map(|_| r.uniform()).sum::<f64>() / n as f64;
        assert!((u - 0.5).abs() < 0.01);
        let z = r.normals(n);
        let mean = z.iter().sum::<f64>() / n as f64;
        let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01 && (var - 1.0).abs() < 0.02);
    }
}
