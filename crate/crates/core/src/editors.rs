// SPDX-License-Identifier: MIT OR Apache-2.0

//! Closed-form locate-then-edit updates.
//!
//! Each method has a direct form and a Woodbury form. Both are kept: the
//! checks in [`crate::verify`] compare them, and the attack relies on the
//! Woodbury form's row space.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::mat::{
    default_rank_tol, dot, numerical_rank, solve_general, solve_spd, svd_thin, Cholesky, Mat,
};

/// Which editor produced an update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Method {
    Rome,
    Memit,
    #[cfg_attr(feature = "serde", serde(rename = "alphaedit"))]
    AlphaEdit,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Rome, Method::Memit, Method::AlphaEdit];

    pub fn name(self) -> &'static str {
        match self {
            Method::Rome => "rome",
            Method::Memit => "memit",
            Method::AlphaEdit => "alphaedit",
        }
    }

    /// Case-insensitive parse of `rome`, `memit`, `alphaedit`.
    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.name().eq_ignore_ascii_case(s))
    }
}

impl core::fmt::Display for Method {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

/// One single-time edit event.
#[derive(Debug, Clone, PartialEq)]
pub struct EditBatch {
    pub subject_ids: Vec<usize>,
    pub template_ids: Vec<usize>,
    pub object_token_ids: Vec<usize>,
    k: Mat,
    r: Mat,
}

impl EditBatch {
    /// Validates lengths and full column rank of `K` and `R`.
    ///
    /// `R = 0` is accepted as the null edit (zero edit strength).
    pub fn new(
        subject_ids: Vec<usize>,
        template_ids: Vec<usize>,
        object_token_ids: Vec<usize>,
        k: Mat,
        r: Mat,
    ) -> Result<Self> {
        let n = k.cols();
        if subject_ids.len() != n || template_ids.len() != n || object_token_ids.len() != n {
            return Err(invalid("id lists must have one entry per key column"));
        }
        if r.cols() != n {
            return Err(invalid("K and R must have the same column count"));
        }
        let rk = full_rank(&k)?;
        if rk != n {
            return Err(Error::DegenerateBatch(format!("rank(K) = {rk} < N = {n}")));
        }
        if r.max_abs() > 0.0 {
            let rr = full_rank(&r)?;
            if rr != n {
                return Err(Error::DegenerateBatch(format!("rank(R) = {rr} < N = {n}")));
            }
        }
        Ok(EditBatch { subject_ids, template_ids, object_token_ids, k, r })
    }

    /// Batch from bare matrices with placeholder ids `0..N`.
    pub fn from_matrices(k: Mat, r: Mat) -> Result<Self> {
        let ids: Vec<usize> = (0..k.cols()).collect();
        EditBatch::new(ids.clone(), ids.clone(), ids, k, r)
    }

    pub fn n(&self) -> usize {
        self.k.cols()
    }

    pub fn k(&self) -> &Mat {
        &self.k
    }

    pub fn r(&self) -> &Mat {
        &self.r
    }

    pub fn d_in(&self) -> usize {
        self.k.rows()
    }

    pub fn d_out(&self) -> usize {
        self.r.rows()
    }
}

fn full_rank(m: &Mat) -> Result<usize> {
    let s = svd_thin(m)?;
    numerical_rank(&s.sigma, default_rank_tol(m.rows(), m.cols()))
}

/// SPD second-moment matrix `C`, with its Cholesky factor cached.
#[derive(Debug, Clone)]
pub struct Covariance {
    c: Mat,
    chol: Cholesky,
}

impl Covariance {
    pub fn new(c: Mat) -> Result<Self> {
        let chol = Cholesky::new(&c)?;
        Ok(Covariance { c, chol })
    }

    pub fn matrix(&self) -> &Mat {
        &self.c
    }

    pub fn dim(&self) -> usize {
        self.c.rows()
    }

    /// `C⁻¹ B`.
    pub fn solve(&self, b: &Mat) -> Result<Mat> {
        self.chol.solve(b)
    }

    pub fn solve_vec(&self, b: &[f64]) -> Vec<f64> {
        self.chol.solve_vec(b)
    }
}

/// `Kp Kpᵀ + ridge·I`.
pub fn covariance_from_keys(kp: &Mat, ridge: f64) -> Result<Covariance> {
    if !(ridge >= 0.0) || !ridge.is_finite() {
        return Err(invalid("ridge must be finite and nonnegative"));
    }
    let c = kp.matmul(&kp.t()).symmetrize();
    let c = if ridge > 0.0 { c.add_diag(ridge) } else { c };
    Covariance::new(c)
}

/// `1e-6·tr(Kp Kpᵀ)/d_in` when there are fewer samples than dimensions, else 0.
pub fn default_ridge(kp: &Mat) -> f64 {
    if kp.cols() < kp.rows() {
        let tr: f64 = kp.data().iter().map(|x| x * x).sum();
        1e-6 * tr / kp.rows() as f64
    } else {
        0.0
    }
}

/// Orthogonal projector, symmetric and idempotent.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    p: Mat,
}

impl Projector {
    pub fn new(p: Mat) -> Result<Self> {
        if !p.is_square() {
            return Err(invalid("projector must be square"));
        }
        if p.symmetry_gap() > 1e-8 {
            return Err(invalid("projector must be symmetric"));
        }
        if p.matmul(&p).max_abs_diff(&p) > 1e-8 {
            return Err(invalid("projector must be idempotent"));
        }
        Ok(Projector { p })
    }

    pub fn identity(n: usize) -> Self {
        Projector { p: Mat::identity(n) }
    }

    pub fn matrix(&self) -> &Mat {
        &self.p
    }

    pub fn dim(&self) -> usize {
        self.p.rows()
    }

    pub fn apply(&self, m: &Mat) -> Mat {
        self.p.matmul(m)
    }

    pub fn apply_vec(&self, v: &[f64]) -> Vec<f64> {
        self.p.mul_vec(v)
    }
}

/// `I − QQᵀ` where `Q` spans `col(Kp)` up to numerical rank.
pub fn nullspace_projector(kp: &Mat, rel_tol: f64) -> Result<Projector> {
    let s = svd_thin(kp)?;
    let r = numerical_rank(&s.sigma, rel_tol)?;
    let d = kp.rows();
    if r == 0 {
        return Ok(Projector::identity(d));
    }
    let q = s.u.leading_columns(r);
    let p = Mat::identity(d).sub(&q.matmul(&q.t())).symmetrize();
    Ok(Projector { p })
}

/// The preservation constraint an editor works under: a covariance for
/// ROME and MEMIT, a null-space projector for AlphaEdit.
#[derive(Debug, Clone, Copy)]
pub enum Constraint<'a> {
    Covariance(&'a Covariance),
    NullSpace(&'a Projector),
}

impl<'a> Constraint<'a> {
    pub fn dim(&self) -> usize {
        match self {
            Constraint::Covariance(c) => c.dim(),
            Constraint::NullSpace(p) => p.dim(),
        }
    }

    /// The metric `M` in `⟨x, y⟩ = xᵀ M y`: `C⁻¹` or `P`, applied to `y`.
    pub fn apply(&self, y: &Mat) -> Result<Mat> {
        match self {
            Constraint::Covariance(c) => c.solve(y),
            Constraint::NullSpace(p) => Ok(p.apply(y)),
        }
    }

    pub fn apply_vec(&self, y: &[f64]) -> Vec<f64> {
        match self {
            Constraint::Covariance(c) => c.solve_vec(y),
            Constraint::NullSpace(p) => p.apply_vec(y),
        }
    }

    /// `Xᵀ M Y`.
    pub fn inner(&self, x: &Mat, y: &Mat) -> Result<Mat> {
        Ok(x.tmatmul(&self.apply(y)?))
    }

    pub(crate) fn expect_for(&self, method: Method) -> Result<()> {
        match (method, self) {
            (Method::Rome | Method::Memit, Constraint::Covariance(_))
            | (Method::AlphaEdit, Constraint::NullSpace(_)) => Ok(()),
            _ => Err(invalid(format!("{method} needs a different preservation constraint"))),
        }
    }
}

/// A weight delta `ΔW` tagged with the editor that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightUpdate {
    pub dw: Mat,
    pub method: Method,
}

fn check_dims(batch: &EditBatch, d: usize) -> Result<()> {
    if batch.d_in() != d {
        return Err(invalid(format!("key dimension {} does not match {d}", batch.d_in())));
    }
    Ok(())
}

/// `ΔW = r (k*ᵀ C⁻¹) / (k*ᵀ C⁻¹ k*)`.
pub fn rome_update(k_star: &[f64], r_star: &[f64], c: &Covariance) -> Result<WeightUpdate> {
    if k_star.len() != c.dim() {
        return Err(invalid("k_star dimension does not match C"));
    }
    if k_star.iter().chain(r_star).any(|x| !x.is_finite()) || r_star.is_empty() {
        return Err(invalid("k_star and r_star must be finite and nonempty"));
    }
    if k_star.iter().all(|&x| x == 0.0) {
        return Err(invalid("k_star must be nonzero"));
    }
    let y = c.solve_vec(k_star);
    let denom = dot(k_star, &y);
    if !(denom > 0.0) {
        return Err(Error::NotSpd(format!("k*ᵀC⁻¹k* = {denom:e}")));
    }
    let dw = Mat::from_fn(r_star.len(), k_star.len(), |i, j| r_star[i] * y[j] / denom);
    Ok(WeightUpdate { dw, method: Method::Rome })
}

/// `ΔW = R Kᵀ (C + K Kᵀ)⁻¹`, via one SPD solve.
pub fn memit_update(batch: &EditBatch, c: &Covariance) -> Result<WeightUpdate> {
    check_dims(batch, c.dim())?;
    let (k, r) = (batch.k(), batch.r());
    let a = c.matrix().add(&k.matmul(&k.t())).symmetrize();
    // (C + KKᵀ) ΔWᵀ = K Rᵀ
    let x = solve_spd(&a, &k.matmul(&r.t()))?;
    Ok(WeightUpdate { dw: x.t(), method: Method::Memit })
}

/// `ΔW = R (I + Kᵀ C⁻¹ K)⁻¹ Kᵀ C⁻¹`.
pub fn memit_update_woodbury(batch: &EditBatch, c: &Covariance) -> Result<WeightUpdate> {
    check_dims(batch, c.dim())?;
    let dw = woodbury(batch, Constraint::Covariance(c))?;
    Ok(WeightUpdate { dw, method: Method::Memit })
}

/// Shared Woodbury form `R (I + Kᵀ M K)⁻¹ Kᵀ M` with `M` symmetric.
fn woodbury(batch: &EditBatch, metric: Constraint<'_>) -> Result<Mat> {
    let (k, r) = (batch.k(), batch.r());
    let mk = metric.apply(k)?;
    let g = k.tmatmul(&mk).symmetrize().add_diag(1.0);
    let z = match solve_spd(&g, &mk.t()) {
        Ok(z) => z,
        Err(Error::NotSpd(m)) => return Err(Error::Singular(m)),
        Err(e) => return Err(e),
    };
    Ok(r.matmul(&z))
}

fn check_projection_rank(batch: &EditBatch, p: &Projector) -> Result<()> {
    let pk = p.apply(batch.k());
    if pk.max_abs() == 0.0 {
        // Everything protected: the update is identically zero.
        return Ok(());
    }
    let rank = full_rank(&pk)?;
    if rank < batch.n() {
        return Err(Error::DegenerateProjection { rank, expected: batch.n() });
    }
    Ok(())
}

/// `ΔW = R Kᵀ P (K Kᵀ P + I)⁻¹`.
///
/// The bracket is not symmetric, so this goes through LU on the transposed
/// system `(P K Kᵀ + I) ΔWᵀ = P K Rᵀ`.
pub fn alphaedit_update(batch: &EditBatch, p: &Projector) -> Result<WeightUpdate> {
    check_dims(batch, p.dim())?;
    check_projection_rank(batch, p)?;
    let (k, r) = (batch.k(), batch.r());
    let pk = p.apply(k);
    let bt = pk.matmul(&k.t()).add_diag(1.0);
    let x = solve_general(&bt, &pk.matmul(&r.t()))?;
    Ok(WeightUpdate { dw: x.t(), method: Method::AlphaEdit })
}

/// `ΔW = R (I + Kᵀ P K)⁻¹ Kᵀ P`.
pub fn alphaedit_update_woodbury(batch: &EditBatch, p: &Projector) -> Result<WeightUpdate> {
    check_dims(batch, p.dim())?;
    check_projection_rank(batch, p)?;
    let dw = woodbury(batch, Constraint::NullSpace(p))?;
    Ok(WeightUpdate { dw, method: Method::AlphaEdit })
}

/// Runs `method` on `batch`. ROME takes the single column of a batch of one.
pub fn apply_method(method: Method, batch: &EditBatch, constraint: Constraint<'_>) -> Result<WeightUpdate> {
    constraint.expect_for(method)?;
    match (method, constraint) {
        (Method::Rome, Constraint::Covariance(c)) => {
            if batch.n() != 1 {
                return Err(invalid("ROME edits exactly one fact"));
            }
            rome_update(&batch.k().column(0), &batch.r().column(0), c)
        }
        (Method::Memit, Constraint::Covariance(c)) => memit_update_woodbury(batch, c),
        (Method::AlphaEdit, Constraint::NullSpace(p)) => alphaedit_update_woodbury(batch, p),
        _ => unreachable!("checked by expect_for"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mat::{max_principal_angle, orthonormal_basis, rel_gap};
    use crate::rng::{standard_normal_mat, stream};
    use alloc::vec;

    fn random_batch(seed: u64, d_in: usize, d_out: usize, n: usize) -> EditBatch {
        let mut r = stream(seed, 0, 0);
        let k = standard_normal_mat(&mut r, d_in, n);
        let rr = standard_normal_mat(&mut r, d_out, n);
        EditBatch::from_matrices(k, rr).unwrap()
    }

    fn random_cov(seed: u64, d: usize) -> Covariance {
        let kp = standard_normal_mat(&mut stream(seed, 0, 9), d, 2 * d);
        covariance_from_keys(&kp.scale(1.0 / libm::sqrt(2.0 * d as f64)), 0.0).unwrap()
    }

    /// Gauss-Jordan inverse, used only as an independent oracle.
    fn gj_inverse(a: &Mat) -> Mat {
        let n = a.rows();
        let mut m = Mat::from_fn(n, 2 * n, |i, j| if j < n { a[(i, j)] } else if j - n == i { 1.0 } else { 0.0 });
        for c in 0..n {
            let p = (c..n).max_by(|&x, &y| m[(x, c)].abs().partial_cmp(&m[(y, c)].abs()).unwrap()).unwrap();
            for j in 0..2 * n {
                let t = m[(c, j)];
                m[(c, j)] = m[(p, j)];
                m[(p, j)] = t;
            }
            let piv = m[(c, c)];
            for j in 0..2 * n {
                m[(c, j)] /= piv;
            }
            for i in 0..n {
                if i != c {
                    let f = m[(i, c)];
                    for j in 0..2 * n {
                        m[(i, j)] -= f * m[(c, j)];
                    }
                }
            }
        }
        Mat::from_fn(n, n, |i, j| m[(i, j + n)])
    }

    #[test]
    fn covariance_examples() {
        let c = covariance_from_keys(&Mat::identity(2), 0.0).unwrap();
        assert_eq!(c.matrix(), &Mat::identity(2));
        let c = covariance_from_keys(&Mat::column_vector(&[1.0, 1.0]).unwrap(), 1.0).unwrap();
        assert_eq!(c.matrix(), &Mat::from_rows(&[&[2.0, 1.0], &[1.0, 2.0]]).unwrap());
        let kp = standard_normal_mat(&mut stream(11, 0, 0), 64, 1000);
        let c = covariance_from_keys(&kp, 0.0).unwrap();
        let dev = c.matrix().scale(1e-3).sub(&Mat::identity(64));
        // Entrywise the sample second moment is within 0.3 of I. In operator
        // norm the Marchenko-Pastur edge puts it near 2√(64/1000) + 64/1000.
        assert!(dev.max_abs() <= 0.3, "max entry {}", dev.max_abs());
        let gap = crate::mat::spectral_norm(&dev).unwrap();
        let edge = 2.0 * libm::sqrt(0.064) + 0.064;
        assert!(gap <= edge + 0.1, "‖C/1000 − I‖₂ = {gap}");
        let thin = Mat::column_vector(&[1.0, 0.0]).unwrap();
        assert!(matches!(covariance_from_keys(&thin, 0.0), Err(Error::NotSpd(_))));
        assert!(covariance_from_keys(&thin, default_ridge(&thin)).is_ok());
    }

    #[test]
    fn projector_examples() {
        let p = nullspace_projector(&Mat::column_vector(&[1.0, 0.0, 0.0]).unwrap(), 1e-12).unwrap();
        assert!(p.matrix().max_abs_diff(&Mat::diag(&[0.0, 1.0, 1.0])) < 1e-15);
        let full = standard_normal_mat(&mut stream(2, 0, 0), 4, 6);
        let p = nullspace_projector(&full, 1e-12).unwrap();
        assert!(p.matrix().max_abs() < 1e-12);
        let kp = standard_normal_mat(&mut stream(5, 0, 0), 32, 8);
        let p = nullspace_projector(&kp, 1e-12).unwrap();
        assert!(p.apply(&kp).max_abs() <= 1e-10);
        assert!(p.matrix().matmul(p.matrix()).max_abs_diff(p.matrix()) <= 1e-10);
        assert!(Projector::new(p.matrix().clone()).is_ok());
        assert!(Projector::new(Mat::diag(&[2.0, 0.0])).is_err());
    }

    #[test]
    fn rome_examples() {
        let c = Covariance::new(Mat::identity(3)).unwrap();
        let r = [1.0, -2.0];
        let up = rome_update(&[1.0, 0.0, 0.0], &r, &c).unwrap();
        assert_eq!(up.dw.column(0), r.to_vec());
        assert_eq!(up.dw.column(1), vec![0.0, 0.0]);
        assert!(rome_update(&[0.0; 3], &r, &c).is_err());

        // Oracle: straight transcription with an explicit inverse.
        let mut s = stream(21, 0, 0);
        let k = crate::rng::standard_normal_vec(&mut s, 16);
        let rv = crate::rng::standard_normal_vec(&mut s, 12);
        let c = random_cov(21, 16);
        let up = rome_update(&k, &rv, &c).unwrap();
        let cinv = gj_inverse(c.matrix());
        let y = cinv.mul_vec(&k);
        let den = dot(&k, &y);
        let oracle = Mat::from_fn(12, 16, |i, j| rv[i] * y[j] / den);
        assert!(rel_gap(&up.dw, &oracle) < 1e-10);
        assert!((up.dw.frobenius() - oracle.frobenius()).abs() < 1e-9 * oracle.frobenius());
        let hit = up.dw.mul_vec(&k);
        let err = hit.iter().zip(&rv).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err <= 1e-8 * crate::mat::norm(&rv));
    }

    #[test]
    fn memit_examples() {
        // Orthonormal K, C = I: ΔW = RKᵀ/2.
        let q = orthonormal_basis(&standard_normal_mat(&mut stream(1, 0, 0), 10, 3), 3).unwrap();
        let r = standard_normal_mat(&mut stream(1, 0, 1), 6, 3);
        let b = EditBatch::from_matrices(q.clone(), r.clone()).unwrap();
        let c = Covariance::new(Mat::identity(10)).unwrap();
        let half = r.matmul(&q.t()).scale(0.5);
        assert!(memit_update(&b, &c).unwrap().dw.max_abs_diff(&half) < 1e-12);
        assert!(memit_update_woodbury(&b, &c).unwrap().dw.max_abs_diff(&half) < 1e-12);

        let b = random_batch(13, 64, 48, 8);
        let c = random_cov(13, 64);
        let d = memit_update(&b, &c).unwrap().dw;
        let w = memit_update_woodbury(&b, &c).unwrap().dw;
        assert!(rel_gap(&d, &w) <= 1e-8);

        // Oracle: explicit inverse of C + KKᵀ.
        let a = c.matrix().add(&b.k().matmul(&b.k().t()));
        let oracle = b.r().matmul(&b.k().t()).matmul(&gj_inverse(&a));
        assert!(rel_gap(&d, &oracle) <= 1e-9);

        let zero = EditBatch::from_matrices(b.k().clone(), Mat::zeros(48, 8)).unwrap();
        assert_eq!(memit_update_woodbury(&zero, &c).unwrap().dw.max_abs(), 0.0);
    }

    #[test]
    fn memit_single_column_matches_formula() {
        let k = [0.6, 0.8, 0.0];
        let r = [1.0, 2.0];
        let b = EditBatch::from_matrices(Mat::column_vector(&k).unwrap(), Mat::column_vector(&r).unwrap()).unwrap();
        let c = Covariance::new(Mat::identity(3)).unwrap();
        let w = memit_update_woodbury(&b, &c).unwrap().dw;
        let expect = Mat::from_fn(2, 3, |i, j| r[i] * k[j] / 2.0);
        assert!(w.max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn alphaedit_examples() {
        let b = random_batch(17, 64, 48, 8);
        let kp = standard_normal_mat(&mut stream(17, 0, 5), 64, 16);
        let p = nullspace_projector(&kp, 1e-12).unwrap();
        let d = alphaedit_update(&b, &p).unwrap().dw;
        let w = alphaedit_update_woodbury(&b, &p).unwrap().dw;
        assert!(rel_gap(&d, &w) <= 1e-8, "{}", rel_gap(&d, &w));

        // row(ΔW) ⊆ col(PK)
        let pk = orthonormal_basis(&p.apply(b.k()), 8).unwrap();
        let rows = orthonormal_basis(&w.t(), 8).unwrap();
        let ang = max_principal_angle(&rows, &pk).unwrap();
        assert!(ang < 1e-6, "{ang}");

        // P = I reduces to R Kᵀ (KKᵀ + I)⁻¹.
        let eye = Projector::identity(64);
        let a = b.k().matmul(&b.k().t()).add_diag(1.0);
        let oracle = b.r().matmul(&b.k().t()).matmul(&gj_inverse(&a));
        assert!(rel_gap(&alphaedit_update(&b, &eye).unwrap().dw, &oracle) < 1e-9);

        // P = 0: nothing may change.
        let zero = Projector::new(Mat::zeros(64, 64)).unwrap();
        assert_eq!(alphaedit_update(&b, &zero).unwrap().dw.max_abs(), 0.0);
        assert_eq!(alphaedit_update_woodbury(&b, &zero).unwrap().dw.max_abs(), 0.0);
    }

    #[test]
    fn alphaedit_degenerate_projection() {
        // Protect e₁; the second key lies entirely in the protected span.
        let p = Projector::new(Mat::diag(&[0.0, 1.0, 1.0])).unwrap();
        let k = Mat::from_rows(&[&[0.0, 1.0], &[1.0, 0.0], &[0.0, 0.0]]).unwrap();
        let r = Mat::identity(2);
        let b = EditBatch::from_matrices(k, r).unwrap();
        assert!(matches!(alphaedit_update(&b, &p), Err(Error::DegenerateProjection { rank: 1, expected: 2 })));
    }

    #[test]
    fn batch_validation() {
        let k = Mat::from_rows(&[&[1.0, 2.0], &[2.0, 4.0]]).unwrap();
        assert!(matches!(EditBatch::from_matrices(k, Mat::identity(2)), Err(Error::DegenerateBatch(_))));
        assert!(EditBatch::new(vec![0], vec![0, 1], vec![0], Mat::identity(2), Mat::identity(2)).is_err());
    }
}
