//! Seeded random streams.
//!
//! Backed by ChaCha8, whose output is a pure function of (seed, stream,
//! counter) and therefore identical on every platform.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Matrix;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream derived from `(seed, stream)`. Forking does not
    /// advance `self`.
    pub fn fork(&self, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream);
        Self {
            seed: self.seed,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in `[0, n)`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }

    /// `k` distinct indices from `0..n`, in sampling order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.inner, n, k).into_vec()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitScheme {
    Zeros,
    /// Normal entries with standard deviation `1/sqrt(cols)`.
    ScaledNormal,
}

pub fn init_matrix(rng: &mut Rng, rows: usize, cols: usize, scheme: InitScheme) -> Result<Matrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::Input(format!(
            "matrix dimensions must be positive, got {rows}x{cols}"
        )));
    }
    match scheme {
        InitScheme::Zeros => Ok(Matrix::zeros(rows, cols)),
        InitScheme::ScaledNormal => {
            let std = 1.0 / (cols as f64).sqrt();
            let data = (0..rows * cols).map(|_| rng.normal() * std).collect();
            Matrix::from_vec(rows, cols, data)
        }
    }
}
