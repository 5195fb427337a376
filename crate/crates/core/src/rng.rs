//! Splittable, counter-based random number generation.
//!
//! An [`Rng`] is a value: a 64-bit seed plus the path of branch labels that
//! led to it. Splitting appends a label and never consumes anything, so the
//! numbers drawn on one path cannot be disturbed by draws made on another.
//! Draws come from an [`RngStream`], a SplitMix64 generator keyed by a hash
//! of the full path.

use serde::{Deserialize, Serialize};

use crate::codec::{CodecError, Decoder, Encoder};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const LABEL_SALT: u64 = 0xD1B5_4A32_D192_ED03;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rng {
    seed: u64,
    path: Vec<u64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            path: Vec::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn path(&self) -> &[u64] {
        &self.path
    }

    /// Child generator on branch `label`.
    pub fn split(&self, label: u64) -> Rng {
        let mut path = Vec::with_capacity(self.path.len() + 1);
        path.extend_from_slice(&self.path);
        path.push(label);
        Rng {
            seed: self.seed,
            path,
        }
    }

    /// 64-bit key summarising seed and path.
    pub fn key(&self) -> u64 {
        let mut h = mix64(self.seed ^ GOLDEN);
        for (depth, label) in self.path.iter().enumerate() {
            let salted = mix64(
                label
                    .wrapping_add(LABEL_SALT)
                    .wrapping_add((depth as u64).wrapping_mul(GOLDEN)),
            );
            h = mix64(h.rotate_left(17) ^ salted).wrapping_add(GOLDEN);
        }
        h
    }

    /// Fresh stream of draws for this path. Calling it twice yields the same
    /// sequence.
    pub fn stream(&self) -> RngStream {
        RngStream { state: self.key() }
    }

    pub(crate) fn encode(&self, w: &mut Encoder) {
        w.u64(self.seed).u32(self.path.len() as u32);
        for label in &self.path {
            w.u64(*label);
        }
    }

    pub(crate) fn decode(r: &mut Decoder<'_>) -> Result<Self, CodecError> {
        let seed = r.u64()?;
        let n = r.u32()? as usize;
        if n > r.remaining() / 8 {
            return Err(r.error(format!("rng path length {n} exceeds input")));
        }
        let path = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>, _>>()?;
        Ok(Self { seed, path })
    }
}

/// SplitMix64 sequence. Not cryptographically secure.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngStream {
    state: u64,
}

impl RngStream {
    pub fn from_seed(seed: u64) -> Self {
        Self { state: seed }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix64(self.state)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)` without modulo bias. `n` must be non-zero.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        // Lemire's multiply-shift with rejection.
        let mut m = (self.next_u64() as u128) * (n as u128);
        let mut low = m as u64;
        if low < n {
            let threshold = n.wrapping_neg() % n;
            while low < threshold {
                m = (self.next_u64() as u128) * (n as u128);
                low = m as u64;
            }
        }
        (m >> 64) as u64
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix_reference_values() {
        // First outputs of SplitMix64 seeded with 0 (Vigna's reference code).
        let mut s = RngStream::from_seed(0);
        assert_eq!(s.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(s.next_u64(), 0x6E78_9E6A_A1B9_65F4);
    }

    #[test]
    fn same_path_same_draws() {
        let a = Rng::new(42).split(1).split(7);
        let b = Rng::new(42).split(1).split(7);
        assert_eq!(a.stream().next_u64(), b.stream().next_u64());
    }

    #[test]
    fn labels_are_not_commutative() {
        let a = Rng::new(5).split(1).split(2);
        let b = Rng::new(5).split(2).split(1);
        assert_ne!(a.key(), b.key());
        assert_ne!(Rng::new(5).split(0).key(), Rng::new(5).key());
    }

    #[test]
    fn branch_draws_do_not_disturb_siblings() {
        let root = Rng::new(9);
        let left = root.split(0);
        let before: Vec<u64> = {
            let mut s = left.stream();
            (0..4).map(|_| s.next_u64()).collect()
        };
        let mut other = root.split(1).stream();
        for _ in 0..1000 {
            other.next_u64();
        }
        let mut s = left.stream();
        let after: Vec<u64> = (0..4).map(|_| s.next_u64()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn below_stays_in_range() {
        let mut s = RngStream::from_seed(3);
        for n in 1..50 {
            for _ in 0..50 {
                assert!(s.below(n) < n);
            }
        }
    }

    #[test]
    fn f64_mean_is_one_half() {
        let mut s = Rng::new(11).stream();
        let n = 100_000;
        let mean = (0..n).map(|_| s.next_f64()).sum::<f64>() / n as f64;
        // sd of the mean = sqrt(1/12 / n) ~ 0.0009
        assert!((mean - 0.5).abs() < 0.005, "mean {mean}");
    }

    #[test]
    fn distinct_leaf_keys_across_many_paths() {
        let root = Rng::new(1);
        let mut keys = std::collections::HashSet::new();
        for a in 0..40u64 {
            for b in 0..40u64 {
                assert!(keys.insert(root.split(a).split(b).key()));
            }
        }
    }
}
