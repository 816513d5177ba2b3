//! Counter-based splittable PRNG.
//!
//! A stream is fully determined by `(seed, stream_id)`; the counter is the
//! ChaCha word position within that stream. Child streams are derived from the
//! parent's identity only, so drawing from a parent never perturbs a child.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Well-known stream labels used by the training pipeline.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const MASK: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const DROP_PATH: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const PROBE: u64 = 6;
    pub const DATA: u64 = 7;
    pub const TEACHER: u64 = 8;
    pub const CLIP: u64 = 9;
}

#[derive(Clone, Debug)]
pub struct Prng {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Prng {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Prng { seed, stream_id, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Number of 32-bit words consumed so far on this stream.
    pub fn counter(&self) -> u128 {
        self.rng.get_word_pos()
    }

    /// Child stream keyed by `label`. Independent of how far `self` has advanced.
    pub fn split(&self, label: u64) -> Prng {
        let child = mix64(self.stream_id ^ mix64(label.wrapping_add(0xA076_1D64_78BD_642F)));
        Prng::new(self.seed, child)
    }

    /// `split` applied along a path of labels.
    pub fn derive(&self, labels: &[u64]) -> Prng {
        labels.iter().fold(self.clone(), |r, &l| r.split(l))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform in `[lo, hi]` (returns `lo` when the interval is empty).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        if hi <= lo {
            return lo;
        }
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Fisher-Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            idx.swap(i, j);
        }
        idx
    }

    /// Truncated normal clipped at two standard deviations by resampling.
    pub fn trunc_normal(&mut self, std: f64) -> f64 {
        loop {
            let z = self.normal();
            if z.abs() <= 2.0 {
                return z * std;
            }
        }
    }
}
