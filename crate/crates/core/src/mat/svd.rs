// SPDX-License-Identifier: MIT OR Apache-2.0

//! One-sided Jacobi (Hestenes) thin SVD.
//!
//! Slow next to a bidiagonal QR solver, but accurate to working precision on
//! small singular values and short enough to audit. The matrices here are at
//! most a few hundred wide.

use alloc::vec;
use alloc::vec::Vec;

use super::{dot, Mat};
use crate::error::{invalid, Result};

const MAX_SWEEPS: usize = 80;
const ORTH_TOL: f64 = 1e-15;

/// Thin SVD `M = U·diag(σ)·Vᵀ` with `r = min(rows, cols)` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    pub u: Mat,
    pub sigma: Vec<f64>,
    pub v: Mat,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Mat {
        let us = Mat::from_fn(self.u.rows(), self.u.cols(), |i, j| self.u[(i, j)] * self.sigma[j]);
        us.matmul(&self.v.t())
    }

    pub fn rank(&self, rel_tol: f64) -> usize {
        count_above(&self.sigma, rel_tol)
    }
}

/// Rank tolerance used when the caller has no better idea:
/// `max(rows, cols) · 2.2e-16 · 1e3`.
pub fn default_rank_tol(rows: usize, cols: usize) -> f64 {
    rows.max(cols) as f64 * 2.2e-16 * 1e3
}

/// Number of `σ_i > rel_tol·σ₁`.
pub fn numerical_rank(sigma: &[f64], rel_tol: f64) -> Result<usize> {
    if !(rel_tol > 0.0) || !rel_tol.is_finite() {
        return Err(invalid("rel_tol must be positive and finite"));
    }
    if sigma.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(invalid("singular values must be finite and nonnegative"));
    }
    if sigma.windows(2).any(|w| w[1] > w[0]) {
        return Err(invalid("singular values must be nonincreasing"));
    }
    Ok(count_above(sigma, rel_tol))
}

fn count_above(sigma: &[f64], rel_tol: f64) -> usize {
    match sigma.first() {
        Some(&s1) if s1 > 0.0 => sigma.iter().take_while(|&&s| s > rel_tol * s1).count(),
        _ => 0,
    }
}

/// Largest singular value.
pub fn spectral_norm(m: &Mat) -> Result<f64> {
    Ok(svd_thin(m)?.sigma[0])
}

/// Thin SVD with a deterministic sign convention: in every column of `V`
/// the entry of largest magnitude (lowest row on ties) is nonnegative.
pub fn svd_thin(m: &Mat) -> Result<SvdResult> {
    m.check_finite("svd input")?;
    let (u, sigma, v) = if m.rows() >= m.cols() {
        jacobi(m)
    } else {
        let (u, s, v) = jacobi(&m.t());
        (v, s, u)
    };
    let mut u = u;
    let mut v = v;
    for j in 0..v.cols() {
        let mut best = 0;
        let mut best_abs = -1.0;
        for i in 0..v.rows() {
            let a = v[(i, j)].abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if v[(best, j)] < 0.0 {
            for i in 0..v.rows() {
                v[(i, j)] = -v[(i, j)];
            }
            for i in 0..u.rows() {
                u[(i, j)] = -u[(i, j)];
            }
        }
    }
    Ok(SvdResult { u, sigma, v })
}

/// Tall case, `rows ≥ cols`. Works column-major internally.
fn jacobi(a: &Mat) -> (Mat, Vec<f64>, Mat) {
    let (m, n) = a.shape();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols[p], &cols[q]);
                    (dot(cp, cp), dot(cq, cq), dot(cp, cq))
                };
                if gamma == 0.0 || gamma.abs() <= ORTH_TOL * libm::sqrt(alpha) * libm::sqrt(beta) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = if zeta >= 0.0 {
                    1.0 / (zeta + libm::sqrt(1.0 + zeta * zeta))
                } else {
                    -1.0 / (-zeta + libm::sqrt(1.0 + zeta * zeta))
                };
                let c = 1.0 / libm::sqrt(1.0 + t * t);
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = cols.iter().map(|c| libm::sqrt(dot(c, c))).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap().then(i.cmp(&j)));

    let sigma: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(n);
    for &j in &order {
        let s = norms[j];
        let mut u = if s > 0.0 { cols[j].iter().map(|x| x / s).collect() } else { vec![0.0; m] };
        orthogonalize(&mut u, &ucols);
        let r = libm::sqrt(dot(&u, &u));
        if r > 0.5 {
            u.iter_mut().for_each(|x| *x /= r);
        } else {
            u = completion(&ucols, m);
        }
        ucols.push(u);
    }
    let vsorted: Vec<Vec<f64>> = order.iter().map(|&j| vcols[j].clone()).collect();
    // Non-empty and rectangular by construction.
    let u = Mat::from_columns(&ucols).expect("u columns");
    let v = Mat::from_columns(&vsorted).expect("v columns");
    (u, sigma, v)
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Two passes of modified Gram-Schmidt against `basis`.
fn orthogonalize(u: &mut [f64], basis: &[Vec<f64>]) {
    for _ in 0..2 {
        for b in basis {
            let h = dot(u, b);
            u.iter_mut().zip(b).for_each(|(x, y)| *x -= h * y);
        }
    }
}

/// Canonical basis vector with the largest component outside `basis`,
/// orthogonalized and normalized. Lowest index wins ties.
fn completion(basis: &[Vec<f64>], m: usize) -> Vec<f64> {
    let mut best: Option<(f64, Vec<f64>)> = None;
    for i in 0..m {
        let mut e = vec![0.0; m];
        e[i] = 1.0;
        orthogonalize(&mut e, basis);
        let r = libm::sqrt(dot(&e, &e));
        if best.as_ref().map_or(true, |(br, _)| r > *br) {
            best = Some((r, e));
        }
    }
    let (r, mut e) = best.expect("m >= 1");
    e.iter_mut().for_each(|x| *x /= r);
    e
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{standard_normal_mat, stream};

    fn orth_gap(q: &Mat) -> f64 {
        q.tmatmul(q).max_abs_diff(&Mat::identity(q.cols()))
    }

    fn assert_valid(m: &Mat, s: &SvdResult) {
        assert!(orth_gap(&s.u) <= 1e-10, "U not orthonormal: {}", orth_gap(&s.u));
        assert!(orth_gap(&s.v) <= 1e-10, "V not orthonormal: {}", orth_gap(&s.v));
        assert!(s.sigma.windows(2).all(|w| w[0] >= w[1]));
        assert!(s.sigma.iter().all(|&x| x >= 0.0));
        let err = s.reconstruct().max_abs_diff(m);
        assert!(err <= 1e-8 * (1.0 + s.sigma[0]), "reconstruction error {err}");
    }

    #[test]
    fn identity_has_unit_singular_values() {
        let s = svd_thin(&Mat::identity(3)).unwrap();
        assert_eq!(s.sigma, vec![1.0, 1.0, 1.0]);
        assert_valid(&Mat::identity(3), &s);
    }

    #[test]
    fn rank_one_outer_product() {
        let m = Mat::from_rows(&[&[0.0, 12.0], &[0.0, 0.0]]).unwrap();
        let s = svd_thin(&m).unwrap();
        assert!((s.sigma[0] - 12.0).abs() < 1e-14);
        assert_eq!(s.sigma[1], 0.0);
        assert_valid(&m, &s);
    }

    #[test]
    fn random_5x3_pinned() {
        // Reference values from an independent LAPACK SVD of the same draw.
        let m = standard_normal_mat(&mut stream(42, 0, 0), 5, 3);
        let s = svd_thin(&m).unwrap();
        assert_valid(&m, &s);
        let err = s.reconstruct().max_abs_diff(&m);
        assert!(err <= 1e-10);
        for (a, b) in s.sigma.iter().zip(REF_SIGMA_5X3) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    // numpy.linalg.svd (LAPACK gesdd) on the same seed-42 draw.
    const REF_SIGMA_5X3: [f64; 3] = [3.0439457979298514, 2.267496765668848, 1.243799279036593];

    #[test]
    fn wide_and_zero_inputs() {
        let m = Mat::from_fn(2, 5, |i, j| (i as f64 + 1.0) * (j as f64 - 2.0));
        let s = svd_thin(&m).unwrap();
        assert_eq!(s.u.shape(), (2, 2));
        assert_eq!(s.v.shape(), (5, 2));
        assert_valid(&m, &s);
        assert_eq!(numerical_rank(&s.sigma, 1e-12).unwrap(), 1);

        let z = Mat::zeros(4, 3);
        let s = svd_thin(&z).unwrap();
        assert_eq!(s.sigma, vec![0.0; 3]);
        assert_valid(&z, &s);
    }

    #[test]
    fn sign_convention_holds() {
        let m = standard_normal_mat(&mut stream(3, 0, 0), 7, 4);
        let s = svd_thin(&m).unwrap();
        for j in 0..4 {
            let col = s.v.column(j);
            let mut best = 0;
            for i in 1..col.len() {
                if col[i].abs() > col[best].abs() {
                    best = i;
                }
            }
            assert!(col[best] >= 0.0);
        }
        let neg = m.scale(-1.0);
        let sn = svd_thin(&neg).unwrap();
        assert_eq!(sn.v, s.v);
    }

    #[test]
    fn numerical_rank_cases() {
        assert_eq!(numerical_rank(&[5.0, 3.0, 1e-14], 1e-9).unwrap(), 2);
        assert_eq!(numerical_rank(&[0.0, 0.0, 0.0], 1e-9).unwrap(), 0);
        assert!(numerical_rank(&[1.0, 2.0], 1e-9).is_err());
        assert!(numerical_rank(&[1.0], 0.0).is_err());
    }

    #[test]
    fn spectral_norm_cases() {
        assert_eq!(spectral_norm(&Mat::identity(4)).unwrap(), 1.0);
        assert!((spectral_norm(&Mat::diag(&[3.0, 1.0])).unwrap() - 3.0).abs() < 1e-15);
        let m = standard_normal_mat(&mut stream(9, 0, 0), 6, 4);
        assert_eq!(spectral_norm(&m).unwrap(), svd_thin(&m).unwrap().sigma[0]);
    }

    #[test]
    fn rejects_non_finite() {
        let mut m = Mat::zeros(2, 2);
        m[(0, 0)] = f64::NAN;
        assert!(svd_thin(&m).is_err());
    }
}
