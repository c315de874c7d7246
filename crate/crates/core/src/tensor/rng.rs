//! Counter-based, splittable random number generator.
//!
//! Each draw hashes `(seed, stream, counter)` through the SplitMix64
//! finaliser, so a stream can be re-derived from its key without replaying
//! the draws that preceded it. All float conversions go through `libm`.

use serde::{Deserialize, Serialize};

use crate::checksum::fnv1a64;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rng {
    algorithm: String,
    seed: u64,
    stream: u64,
    counter: u64,
}

impl Rng {
    pub const ALGORITHM: &'static str = "splitmix64-ctr/1";

    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        Self { algorithm: Self::ALGORITHM.to_string(), seed, stream, counter: 0 }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Independent child stream keyed by `tag`. Does not advance `self`.
    pub fn split(&self, tag: u64) -> Self {
        Self::with_stream(self.seed, mix(self.stream ^ mix(tag.wrapping_add(GOLDEN))))
    }

    /// Child stream keyed by a label, e.g. a parameter name.
    pub fn derive(&self, label: &str) -> Self {
        self.split(fnv1a64(label.as_bytes()))
    }

    pub fn next_u64(&mut self) -> u64 {
        let key = mix(self.seed ^ mix(self.stream.wrapping_mul(GOLDEN) ^ 0x5851_f42d_4c95_7f2d));
        let out = mix(key.wrapping_add(self.counter.wrapping_mul(GOLDEN)));
        self.counter = self.counter.wrapping_add(1);
        out
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "Rng::below(0)");
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal sample (Box-Muller, one value per two draws).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * std::f64::consts::PI * u2)
    }

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
    fn same_key_same_stream() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn splits_are_distinct_and_reproducible() {
        let root = Rng::new(7);
        let mut a = root.derive("block0.ffn.wi");
        let mut b = root.derive("block0.ffn.wo");
        let mut a2 = root.derive("block0.ffn.wi");
        let x = a.next_u64();
        assert_ne!(x, b.next_u64());
        assert_eq!(x, a2.next_u64());
    }

    #[test]
    fn known_first_values() {
        // Reference values from an independent reimplementation of the mixer.
        let mut r = Rng::new(0);
        assert_eq!(r.next_u64(), 0x1218_b420_e9e2_5949);
        assert_eq!(r.next_u64(), 0xb12d_3c42_b20c_715c);
        assert_eq!(r.next_u64(), 0x7661_3c5e_0bf5_8646);
        let mut r = Rng::with_stream(42, 7);
        assert_eq!(r.next_u64(), 0x8b2d_9e5f_c449_ad6c);
        assert_eq!(r.next_u64(), 0x8ecd_9b3a_c10c_69b5);
    }

    #[test]
    fn shuffle_is_permutation() {
        let mut v: Vec<usize> = (0..50).collect();
        Rng::new(3).shuffle(&mut v);
        let mut s = v.clone();
        s.sort();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
        assert_ne!(v, s);
    }
}
