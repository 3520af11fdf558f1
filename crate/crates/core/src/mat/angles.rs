// SPDX-License-Identifier: MIT OR Apache-2.0

use alloc::vec::Vec;

use super::{svd_thin, Mat};
use crate::error::{invalid, Error, Result};

const ORTHONORMAL_TOL: f64 = 1e-8;

/// Principal angles between `col(u1)` and `col(u2)`, nondecreasing, in
/// `[0, π/2]`. Both inputs need orthonormal columns and equal column count.
pub fn principal_angles(u1: &Mat, u2: &Mat) -> Result<Vec<f64>> {
    if u1.rows() != u2.rows() || u1.cols() != u2.cols() {
        return Err(invalid("principal_angles: shape mismatch"));
    }
    for u in [u1, u2] {
        let gap = u.tmatmul(u).max_abs_diff(&Mat::identity(u.cols()));
        if !(gap <= ORTHONORMAL_TOL) {
            return Err(invalid(alloc::format!("columns not orthonormal (gap {gap:e})")));
        }
    }
    let proj = u1.tmatmul(u2);
    let cos = svd_thin(&proj)?.sigma;
    // acos loses half the digits near 0, so small angles come from the sines
    // of the residual u2 − u1 u1ᵀ u2 instead.
    let mut sin = svd_thin(&u2.sub(&u1.matmul(&proj)))?.sigma;
    sin.reverse();
    Ok(cos
        .iter()
        .zip(&sin)
        .map(|(&c, &s)| {
            let c = c.clamp(0.0, 1.0);
            if c * c >= 0.5 { libm::asin(s.clamp(0.0, 1.0)) } else { libm::acos(c) }
        })
        .collect())
}

/// Largest principal angle, or `π/2` when either side is empty.
pub fn max_principal_angle(u1: &Mat, u2: &Mat) -> Result<f64> {
    Ok(principal_angles(u1, u2)?.last().copied().unwrap_or(core::f64::consts::FRAC_PI_2))
}

/// Orthonormal basis for the span of the leading `n` left singular vectors.
pub fn orthonormal_basis(m: &Mat, n: usize) -> Result<Mat> {
    if n == 0 || n > m.cols().min(m.rows()) {
        return Err(Error::InsufficientRank { requested: n, available: m.cols().min(m.rows()) });
    }
    Ok(svd_thin(m)?.u.leading_columns(n))
}
