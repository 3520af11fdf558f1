// SPDX-License-Identifier: MIT OR Apache-2.0

//! Counter-based random streams.
//!
//! Every consumer asks for `stream(seed, domain, index)`: ChaCha8 keyed by the
//! seed with the stream id built from `(domain, index)`. Two calls with the
//! same triple see the same numbers no matter what ran in between, which is
//! what makes parallel trials order-independent.

use alloc::vec::Vec;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::mat::Mat;

pub type Stream = ChaCha8Rng;

pub mod domain {
    pub const WORLD: u64 = 1;
    pub const BATCH: u64 = 2;
    pub const TRIAL: u64 = 3;
    pub const DECOY: u64 = 4;
    pub const COVARIANCE: u64 = 5;
    pub const NOISE: u64 = 6;
    pub const ALIAS: u64 = 7;
    pub const INSTANCE: u64 = 8;
}

pub fn stream(seed: u64, domain: u64, index: u64) -> Stream {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream((domain << 40) ^ index);
    r
}

/// A fresh 64-bit seed derived from `(seed, domain, index)`.
pub fn derive_seed(seed: u64, domain: u64, index: u64) -> u64 {
    stream(seed, domain, index).next_u64()
}

pub fn standard_normal(r: &mut Stream) -> f64 {
    r.sample(StandardNormal)
}

pub fn standard_normal_vec(r: &mut Stream, n: usize) -> Vec<f64> {
    (0..n).map(|_| standard_normal(r)).collect()
}

/// Row-major fill with independent `N(0, 1)` entries.
pub fn standard_normal_mat(r: &mut Stream, rows: usize, cols: usize) -> Mat {
    Mat::from_fn(rows, cols, |_, _| standard_normal(r))
}

/// Uniform on the unit sphere in `ℝⁿ`.
pub fn unit_vector(r: &mut Stream, n: usize) -> Vec<f64> {
    loop {
        let v = standard_normal_vec(r, n);
        let nv = crate::mat::norm(&v);
        if nv > 1e-12 {
            return v.into_iter().map(|x| x / nv).collect();
        }
    }
}

/// `k` distinct indices from `0..n`, in draw order.
pub fn sample_distinct(r: &mut Stream, n: usize, k: usize) -> Vec<usize> {
    rand::seq::index::sample(r, n, k).into_vec()
}

/// Uniform on `[0, 1)`.
pub fn uniform_unit(r: &mut Stream) -> f64 {
    r.random::<f64>()
}

pub fn uniform_index(r: &mut Stream, n: usize) -> usize {
    r.random_range(0..n)
}

/// Random orthogonal matrix from the SVD of a Gaussian draw.
pub fn random_orthogonal(r: &mut Stream, n: usize) -> Mat {
    let g = standard_normal_mat(r, n, n);
    // A Gaussian square matrix is almost surely nonsingular; the SVD
    // completes the basis regardless.
    crate::mat::svd_thin(&g).expect("finite gaussian").u
}
