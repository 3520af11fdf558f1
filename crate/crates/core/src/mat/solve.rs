// SPDX-License-Identifier: MIT OR Apache-2.0

use alloc::format;
use alloc::vec::Vec;

use super::Mat;
use crate::error::{invalid, Error, Result};

/// Lower-triangular Cholesky factor `A = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: Mat,
}

impl Cholesky {
    /// Factors `a`, checking symmetry to `1e-8·‖A‖_max` first.
    pub fn new(a: &Mat) -> Result<Self> {
        if !a.is_square() {
            return Err(invalid("cholesky needs a square matrix"));
        }
        a.check_finite("cholesky input")?;
        let scale = a.max_abs();
        if a.symmetry_gap() > 1e-8 * scale {
            return Err(Error::NotSpd(format!("asymmetric: gap {:e}", a.symmetry_gap())));
        }
        let n = a.rows();
        let mut l = Mat::zeros(n, n);
        for j in 0..n {
            let mut d = a[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::NotSpd(format!("nonpositive pivot {d:e} at {j}")));
            }
            let djj = libm::sqrt(d);
            l[(j, j)] = djj;
            for i in (j + 1)..n {
                // Read the lower triangle only; the matrix may be slightly asymmetric.
                let mut s = 0.5 * (a[(i, j)] + a[(j, i)]);
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / djj;
            }
        }
        Ok(Cholesky { l })
    }

    pub fn dim(&self) -> usize {
        self.l.rows()
    }

    pub fn factor(&self) -> &Mat {
        &self.l
    }

    pub fn solve_vec(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        assert_eq!(b.len(), n);
        let l = &self.l;
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= l[(i, k)] * y[k];
            }
            y[i] = s / l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= l[(k, i)] * y[k];
            }
            y[i] = s / l[(i, i)];
        }
        y
    }

    /// `A⁻¹ B`, column by column.
    pub fn solve(&self, b: &Mat) -> Result<Mat> {
        if b.rows() != self.dim() {
            return Err(invalid("right-hand side has wrong row count"));
        }
        let mut x = Mat::zeros(b.rows(), b.cols());
        for j in 0..b.cols() {
            x.set_column(j, &self.solve_vec(&b.column(j)));
        }
        Ok(x)
    }

    /// `xᵀ A⁻¹ x`.
    pub fn inv_quad(&self, x: &[f64]) -> f64 {
        super::dot(x, &self.solve_vec(x))
    }
}

/// `A⁻¹ B` for symmetric positive definite `A`.
pub fn solve_spd(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.rows() != b.rows() {
        return Err(invalid("solve_spd: row mismatch"));
    }
    Cholesky::new(a)?.solve(b)
}

/// LU with partial pivoting, `P A = L U`.
#[derive(Debug, Clone)]
pub struct Lu {
    lu: Mat,
    perm: Vec<usize>,
}

impl Lu {
    pub fn new(a: &Mat) -> Result<Self> {
        if !a.is_square() {
            return Err(invalid("LU needs a square matrix"));
        }
        a.check_finite("LU input")?;
        let n = a.rows();
        let tiny = n as f64 * f64::EPSILON * a.max_abs();
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let mut p = k;
            for i in (k + 1)..n {
                if lu[(i, k)].abs() > lu[(p, k)].abs() {
                    p = i;
                }
            }
            if !(lu[(p, k)].abs() > tiny) {
                return Err(Error::Singular(format!("pivot {:e} at column {k}", lu[(p, k)])));
            }
            if p != k {
                perm.swap(p, k);
                for j in 0..n {
                    let t = lu[(p, j)];
                    lu[(p, j)] = lu[(k, j)];
                    lu[(k, j)] = t;
                }
            }
            let piv = lu[(k, k)];
            for i in (k + 1)..n {
                let f = lu[(i, k)] / piv;
                lu[(i, k)] = f;
                if f != 0.0 {
                    for j in (k + 1)..n {
                        lu[(i, j)] -= f * lu[(k, j)];
                    }
                }
            }
        }
        Ok(Lu { lu, perm })
    }

    pub fn solve_vec(&self, b: &[f64]) -> Vec<f64> {
        let n = self.lu.rows();
        assert_eq!(b.len(), n);
        let mut y: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= self.lu[(i, k)] * y[k];
            }
            y[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= self.lu[(i, k)] * y[k];
            }
            y[i] = s / self.lu[(i, i)];
        }
        y
    }

    pub fn solve(&self, b: &Mat) -> Result<Mat> {
        if b.rows() != self.lu.rows() {
            return Err(invalid("right-hand side has wrong row count"));
        }
        let mut x = Mat::zeros(b.rows(), b.cols());
        for j in 0..b.cols() {
            x.set_column(j, &self.solve_vec(&b.column(j)));
        }
        Ok(x)
    }
}

/// `A⁻¹ B` for a general square `A`.
pub fn solve_general(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.rows() != b.rows() {
        return Err(invalid("solve_general: row mismatch"));
    }
    Lu::new(a)?.solve(b)
}

/// `B A⁻¹`, i.e. the solution of `X A = B`.
pub(crate) fn solve_right(b: &Mat, a: &Mat) -> Result<Mat> {
    Ok(solve_general(&a.t(), &b.t())?.t())
}
