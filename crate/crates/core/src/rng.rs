//! Seeded, splittable random streams.
//!
//! Every consumer of randomness (weight init, adapter init, data generation,
//! label sampling, random layer subsets) draws from its own named stream so
//! that adding draws in one place never shifts the numbers seen elsewhere.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Well-known stream ids. Streams with the same seed but different ids are
/// independent.
pub mod streams {
    pub const BASE_WEIGHTS: u64 = 1;
    pub const PLANTED_LAYERS: u64 = 2;
    pub const PERTURBATION: u64 = 3;
    pub const DATA: u64 = 4;
    pub const ADAPTERS: u64 = 5;
    pub const FISHER_LABELS: u64 = 6;
    pub const RANDOM_SUBSET: u64 = 7;
    pub const POWER_ITERATION: u64 = 8;
    pub const TEST: u64 = 99;
}

#[derive(Debug, Clone)]
pub struct RngStream {
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { rng }
    }

    /// Standard normal draw.
    pub fn gaussian(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform draw in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    /// A uniformly random `k`-subset of `0..n`, returned sorted.
    pub fn subset(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut picked = rand::seq::index::sample(&mut self.rng, n, k).into_vec();
        picked.sort_unstable();
        picked
    }

    /// Sample an index from an unnormalized non-negative weight vector.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut u = self.uniform() * total;
        for (i, &w) in weights.iter().enumerate() {
            if u < w {
                return i;
            }
            u -= w;
        }
        weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
    }
}
