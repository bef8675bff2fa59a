//! Deterministic low-discrepancy sampling over boxes.

use serde::{Deserialize, Serialize};

const PRIMES: [u32; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

/// Radical inverse of `index` in the given base.
fn radical_inverse(mut index: u64, base: u32) -> f64 {
    let b = base as u64;
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut acc = 0.0;
    while index > 0 {
        acc += (index % b) as f64 * f;
        index /= b;
        f *= inv;
    }
    acc
}

/// Point `index` of the Halton sequence in `[0, 1)^dim`. Index 0 is skipped.
pub fn halton(index: u64, dim: usize) -> Vec<f64> {
    assert!(dim <= PRIMES.len(), "Halton sampling supports at most {} dimensions", PRIMES.len());
    (0..dim).map(|d| radical_inverse(index + 1, PRIMES[d])).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoundingBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        assert_eq!(lower.len(), upper.len());
        BoundingBox { lower, upper }
    }

    pub fn cube(dim: usize, radius: f64) -> Self {
        BoundingBox { lower: vec![-radius; dim], upper: vec![radius; dim] }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().zip(&self.lower).zip(&self.upper).all(|((v, lo), hi)| *v >= *lo && *v <= *hi)
    }

    /// The `index`-th Halton point mapped into the box.
    pub fn sample(&self, index: u64) -> Vec<f64> {
        halton(index, self.dim())
            .into_iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(u, (lo, hi))| lo + u * (hi - lo))
            .collect()
    }

    pub fn samples(&self, count: usize) -> impl Iterator<Item = Vec<f64>> + '_ {
        (0..count as u64).map(move |i| self.sample(i))
    }
}
