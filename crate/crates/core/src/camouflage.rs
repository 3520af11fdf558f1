// SPDX-License-Identifier: MIT OR Apache-2.0

//! Subspace camouflage.
//!
//! The defended update `ΔW_def = ΔW K (K̃ᵀ M K + λI)⁻¹ K̃ᵀ M`, with `M = C⁻¹`
//! (ROME, MEMIT) or `M = P` (AlphaEdit), acts like `ΔW` on the true keys but
//! has its row space in `col(M K̃)`. `K̃` mixes decoy keys into `K`.
//!
//! The residual constructions show the defended update is exactly what the
//! undefended editor would produce for some other batch: `(K̃, R′)`, or
//! `(K′, R″)` for any admissible `K′`.

use alloc::format;
use alloc::vec::Vec;

use crate::editors::{apply_method, Constraint, EditBatch, Method, WeightUpdate};
use crate::error::{invalid, Error, Result};
use crate::mat::{dot, solve_right, solve_spd, spectral_norm, Mat};
use crate::rng::{self, domain};
use crate::worldsim::SyntheticWorld;

pub const DEFAULT_LAMBDA: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct DefenseParams {
    pub alpha: f64,
    pub lambda: f64,
    /// Exactly one decoy per edit. Empty asks the harness to draw them.
    pub decoy_subject_ids: Vec<usize>,
}

impl Default for DefenseParams {
    fn default() -> Self {
        DefenseParams { alpha: 1.0, lambda: DEFAULT_LAMBDA, decoy_subject_ids: Vec::new() }
    }
}

impl DefenseParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(invalid("alpha must be finite and nonnegative"));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(invalid("lambda must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// `n` distinct decoys drawn uniformly from subjects outside `edited`.
pub fn select_decoys(world: &SyntheticWorld, edited: &[usize], n: usize, call_index: u64) -> Result<Vec<usize>> {
    let pool: Vec<usize> = (0..world.config().n_subjects).filter(|s| !edited.contains(s)).collect();
    if pool.len() < n {
        return Err(invalid(format!("need {n} decoys, only {} non-edited subjects", pool.len())));
    }
    let mut r = rng::stream(world.config().seed, domain::DECOY, call_index);
    Ok(rng::sample_distinct(&mut r, pool.len(), n).into_iter().map(|i| pool[i]).collect())
}

/// Decoy keys under `template_id`, one column per decoy.
pub fn build_decoy_keys(world: &SyntheticWorld, decoy_ids: &[usize], template_id: usize, edited: &[usize]) -> Result<Mat> {
    if let Some(s) = decoy_ids.iter().find(|s| edited.contains(s)) {
        return Err(invalid(format!("decoy {s} is an edited subject")));
    }
    let templates: Vec<usize> = decoy_ids.iter().map(|_| template_id).collect();
    world.key_matrix(decoy_ids, &templates)
}

/// `K̃ = K + α (‖K‖₂ / ‖K_decoy‖₂) K_decoy`, spectral norms.
pub fn aggregate_camouflage_keys(k: &Mat, k_decoy: &Mat, alpha: f64) -> Result<Mat> {
    if k.shape() != k_decoy.shape() {
        return Err(invalid("K and K_decoy shapes differ"));
    }
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(invalid("alpha must be finite and nonnegative"));
    }
    if alpha == 0.0 {
        return Ok(k.clone());
    }
    let nd = spectral_norm(k_decoy)?;
    if nd == 0.0 {
        return Err(invalid("K_decoy is zero"));
    }
    let s = alpha * spectral_norm(k)? / nd;
    Ok(k.add(&k_decoy.scale(s)))
}

fn degenerate(e: Error) -> Error {
    match e {
        Error::Singular(m) | Error::NotSpd(m) => Error::CamouflageDegenerate(m),
        other => other,
    }
}

fn check_shapes(dw: &Mat, k: &Mat, k_tilde: &Mat, constraint: Constraint<'_>) -> Result<()> {
    if k.shape() != k_tilde.shape() || dw.cols() != k.rows() || constraint.dim() != k.rows() {
        return Err(invalid("ΔW, K, K̃ and the constraint disagree in shape"));
    }
    Ok(())
}

/// Defended update for the method recorded in `dw`.
pub fn defense_update(
    dw: &WeightUpdate,
    batch: &EditBatch,
    k_tilde: &Mat,
    constraint: Constraint<'_>,
    params: &DefenseParams,
) -> Result<WeightUpdate> {
    params.validate()?;
    constraint.expect_for(dw.method)?;
    let k = batch.k();
    check_shapes(&dw.dw, k, k_tilde, constraint)?;
    let out = match (dw.method, constraint) {
        (Method::Rome, Constraint::Covariance(c)) => {
            if k.cols() != 1 {
                return Err(invalid("ROME defense takes a single key"));
            }
            let ks = k.column(0);
            let kt = k_tilde.column(0);
            let y = c.solve_vec(&kt);
            let g = dot(&y, &ks) + params.lambda;
            let scale = crate::mat::norm(&y) * crate::mat::norm(&ks);
            if !(g.abs() > 1e-14 * scale) {
                return Err(Error::CamouflageDegenerate(format!("k̃ᵀC⁻¹k* = {g:e}")));
            }
            let hit = dw.dw.mul_vec(&ks);
            Mat::from_fn(hit.len(), y.len(), |i, j| hit[i] * y[j] / g)
        }
        _ => {
            let y = constraint.apply(k_tilde)?;
            let g = y.tmatmul(k).add_diag(params.lambda);
            let b = dw.dw.matmul(k);
            // X G = B
            let x = solve_right(&b, &g).map_err(degenerate)?;
            x.matmul(&y.t())
        }
    };
    Ok(WeightUpdate { dw: out, method: dw.method })
}

/// `‖ΔW_def K − ΔW K‖_max / (1 + ‖ΔW K‖_max)`.
pub fn consistency_residual(dw: &Mat, dw_def: &Mat, k: &Mat) -> f64 {
    let a = dw.matmul(k);
    dw_def.matmul(k).max_abs_diff(&a) / (1.0 + a.max_abs())
}

/// `ΔW_def(K, K̃, R)`: run the editor on `(K, R)`, then camouflage.
pub fn defended_from_parts(
    method: Method,
    k: &Mat,
    r: &Mat,
    k_tilde: &Mat,
    constraint: Constraint<'_>,
    lambda: f64,
) -> Result<Mat> {
    let batch = EditBatch::from_matrices(k.clone(), r.clone())?;
    let dw = apply_method(method, &batch, constraint)?;
    let params = DefenseParams { alpha: 0.0, lambda, decoy_subject_ids: Vec::new() };
    Ok(defense_update(&dw, &batch, k_tilde, constraint, &params)?.dw)
}

fn construction(e: Error) -> Error {
    match e {
        Error::Singular(m) | Error::NotSpd(m) => Error::ConstructionFailed(m),
        other => other,
    }
}

/// `R (I + KᵀMK)⁻¹ (KᵀMK) (K̃ᵀMK + λI)⁻¹`, the common head of both residual maps.
fn residual_head(batch: &EditBatch, k_tilde: &Mat, constraint: Constraint<'_>, lambda: f64) -> Result<Mat> {
    let k = batch.k();
    let b = constraint.inner(k, k)?.symmetrize();
    let a = b.add_diag(1.0);
    let g = constraint.inner(k_tilde, k)?.add_diag(lambda);
    // R A⁻¹ B G⁻¹ = R · (A⁻¹ · (B · G⁻¹))
    let bg = solve_right(&b, &g).map_err(construction)?;
    let abg = solve_spd(&a, &bg).map_err(construction)?;
    Ok(batch.r().matmul(&abg))
}

/// ROME scalar form: `r · (k̃ᵀC⁻¹k_other + λ_num) / (k̃ᵀC⁻¹k + λ)`.
fn rome_ratio(batch: &EditBatch, k_tilde: &Mat, k_other: &Mat, constraint: Constraint<'_>, lambda: f64, lambda_num: f64) -> Result<Mat> {
    let y = constraint.apply_vec(&k_tilde.column(0));
    let den = dot(&y, &batch.k().column(0)) + lambda;
    let num = dot(&y, &k_other.column(0)) + lambda_num;
    if !(den.abs() > 0.0) {
        return Err(Error::ConstructionFailed(format!("k̃ᵀC⁻¹k = {den:e}")));
    }
    Ok(batch.r().scale(num / den))
}

/// `R′` with `ΔW_method(K̃, R′) = ΔW_def`.
///
/// `lambda` is the ridge the defended update was built with; every
/// `K̃ᵀ M K` factor carries it so the identity is exact rather than
/// `O(λ)`. With `lambda = 0` this is the textbook construction.
pub fn equivalent_residual(
    method: Method,
    batch: &EditBatch,
    k_tilde: &Mat,
    constraint: Constraint<'_>,
    lambda: f64,
) -> Result<Mat> {
    constraint.expect_for(method)?;
    if k_tilde.shape() != batch.k().shape() {
        return Err(invalid("K̃ shape differs from K"));
    }
    if method == Method::Rome {
        return rome_ratio(batch, k_tilde, k_tilde, constraint, lambda, 0.0);
    }
    let head = residual_head(batch, k_tilde, constraint, lambda)?;
    let d = constraint.inner(k_tilde, k_tilde)?.symmetrize().add_diag(1.0);
    Ok(head.matmul(&d))
}

/// `R″` with `ΔW_def(K′, K̃, R″) = ΔW_def(K, K̃, R)`; ridge as in
/// [`equivalent_residual`].
pub fn alias_residual(
    method: Method,
    batch: &EditBatch,
    k_prime: &Mat,
    k_tilde: &Mat,
    constraint: Constraint<'_>,
    lambda: f64,
) -> Result<Mat> {
    constraint.expect_for(method)?;
    if k_tilde.shape() != batch.k().shape() || k_prime.shape() != batch.k().shape() {
        return Err(invalid("K′ and K̃ must match K in shape"));
    }
    if method == Method::Rome {
        return rome_ratio(batch, k_tilde, k_prime, constraint, lambda, lambda);
    }
    let head = residual_head(batch, k_tilde, constraint, lambda)?;
    let tp = constraint.inner(k_tilde, k_prime)?.add_diag(lambda);
    let pp = constraint.inner(k_prime, k_prime)?.symmetrize();
    let tail = solve_spd(&pp, &pp.add_diag(1.0)).map_err(construction)?;
    Ok(head.matmul(&tp).matmul(&tail))
}

/// A camouflaged update together with what produced it.
#[derive(Debug, Clone)]
pub struct Defended {
    pub decoys: Vec<usize>,
    pub k_tilde: Mat,
    pub update: WeightUpdate,
    pub consistency: f64,
}

/// Builds decoys (given or drawn), `K̃`, and the defended update.
pub fn camouflage(
    world: &SyntheticWorld,
    batch: &EditBatch,
    dw: &WeightUpdate,
    constraint: Constraint<'_>,
    params: &DefenseParams,
    template_id: usize,
    call_index: u64,
) -> Result<Defended> {
    params.validate()?;
    let n = batch.n();
    let decoys = if params.decoy_subject_ids.is_empty() {
        select_decoys(world, &batch.subject_ids, n, call_index)?
    } else if params.decoy_subject_ids.len() == n {
        params.decoy_subject_ids.clone()
    } else {
        return Err(invalid(format!("expected {n} decoys, got {}", params.decoy_subject_ids.len())));
    };
    let k_decoy = build_decoy_keys(world, &decoys, template_id, &batch.subject_ids)?;
    let k_tilde = aggregate_camouflage_keys(batch.k(), &k_decoy, params.alpha)?;
    let update = defense_update(dw, batch, &k_tilde, constraint, params)?;
    let consistency = consistency_residual(&dw.dw, &update.dw, batch.k());
    Ok(Defended { decoys, k_tilde, update, consistency })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::editors::Covariance;
    use crate::mat::{max_principal_angle, orthonormal_basis, rel_gap};
    use crate::rng::{standard_normal_mat, stream};
    use crate::worldsim::{new_world, WorldConfig};
    use alloc::vec;

    fn world(seed: u64) -> SyntheticWorld {
        new_world(&WorldConfig { d_in: 64, d_out: 48, n_subjects: 128, n_templates: 8, eta: 0.05, n_preserved: 48, seed, ..WorldConfig::default() }).unwrap()
    }

    #[test]
    fn aggregate_examples() {
        let k = Mat::identity(2);
        let kd = Mat::from_rows(&[&[0.0, 0.0], &[1.0, 0.0]]).unwrap();
        assert_eq!(aggregate_camouflage_keys(&k, &kd, 0.0).unwrap(), k);
        let kt = aggregate_camouflage_keys(&k, &kd, 1.0).unwrap();
        // ‖I‖₂ = 1, ‖K_decoy‖₂ = 1.
        assert_eq!(kt, Mat::from_rows(&[&[1.0, 0.0], &[1.0, 1.0]]).unwrap());
        assert!(aggregate_camouflage_keys(&k, &kd.scale(7.0), 1.0).unwrap().max_abs_diff(&kt) < 1e-15);
        assert!(aggregate_camouflage_keys(&k, &Mat::zeros(2, 2), 1.0).is_err());
    }

    #[test]
    fn decoys_are_valid() {
        let w = world(23);
        let edited = vec![1, 2, 3];
        let d = select_decoys(&w, &edited, 8, 0).unwrap();
        assert_eq!(d, select_decoys(&w, &edited, 8, 0).unwrap());
        assert!(d.iter().all(|s| !edited.contains(s)));
        let kd = build_decoy_keys(&w, &d, 0, &edited).unwrap();
        let s = crate::mat::svd_thin(&kd).unwrap();
        assert_eq!(s.rank(1e-12), 8);
        assert!(build_decoy_keys(&w, &[2], 0, &edited).is_err());
        let z = new_world(&WorldConfig { eta: 0.0, ..w.config().clone() }).unwrap();
        assert_eq!(build_decoy_keys(&z, &[9], 0, &[]).unwrap().column(0), z.subject_embeddings().column(9));
    }

    #[test]
    fn rome_defense_matches_matrix_form_and_keeps_edit() {
        let w = world(31);
        let c = w.exact_covariance().unwrap();
        let cons = Constraint::Covariance(&c);
        let (b, up) = w.synthesize_edit_batch(1, Method::Rome, cons, 0).unwrap();
        let p = DefenseParams { alpha: 5.0, ..DefenseParams::default() };
        let d = camouflage(&w, &b, &up, cons, &p, 0, 0).unwrap();
        let hit = d.update.dw.mul_vec(&b.k().column(0));
        let r = b.r().column(0);
        let err = hit.iter().zip(&r).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err <= 1e-8, "{err}");
        // Matrix form at N = 1.
        let y = c.solve(&d.k_tilde).unwrap();
        let g = y.tmatmul(b.k()).add_diag(p.lambda);
        let mat_form = up.dw.matmul(b.k()).scale(1.0 / g[(0, 0)]).matmul(&y.t());
        assert!(rel_gap(&d.update.dw, &mat_form) < 1e-12);
    }

    #[test]
    fn memit_defense_moves_the_key_space() {
        let w = world(23);
        let c = w.exact_covariance().unwrap();
        let cons = Constraint::Covariance(&c);
        let (b, up) = w.synthesize_edit_batch(8, Method::Memit, cons, 0).unwrap();
        let p = DefenseParams { alpha: 5.0, ..DefenseParams::default() };
        let d = camouflage(&w, &b, &up, cons, &p, 0, 0).unwrap();
        assert!(d.consistency <= 1e-6);
        let basis = crate::kster::recover_key_space(&d.update, Some(&c), 8).unwrap();
        let kt = orthonormal_basis(&d.k_tilde, 8).unwrap();
        let k = orthonormal_basis(b.k(), 8).unwrap();
        assert!(max_principal_angle(&basis, &kt).unwrap() <= 1e-4);
        assert!(max_principal_angle(&basis, &k).unwrap() >= 0.3);
    }

    #[test]
    fn residual_constructions() {
        let w = world(23);
        let c = w.exact_covariance().unwrap();
        let p = w.preserved_projector().unwrap();
        for (method, n, cons) in [
            (Method::Rome, 1, Constraint::Covariance(&c)),
            (Method::Memit, 8, Constraint::Covariance(&c)),
            (Method::AlphaEdit, 8, Constraint::NullSpace(&p)),
        ] {
            let (b, up) = w.synthesize_edit_batch(n, method, cons, 0).unwrap();
            let params = DefenseParams { alpha: 3.0, ..DefenseParams::default() };
            let d = camouflage(&w, &b, &up, cons, &params, 0, 0).unwrap();
            let rp = equivalent_residual(method, &b, &d.k_tilde, cons, params.lambda).unwrap();
            let alt = apply_method(method, &EditBatch::from_matrices(d.k_tilde.clone(), rp.clone()).unwrap(), cons).unwrap();
            assert!(rel_gap(&alt.dw, &d.update.dw) <= 1e-6, "{method}: {}", rel_gap(&alt.dw, &d.update.dw));

            // K′ = K̃ collapses R″ to R′ only without the ridge.
            let same = alias_residual(method, &b, &d.k_tilde, &d.k_tilde, cons, 0.0).unwrap();
            let rp0 = equivalent_residual(method, &b, &d.k_tilde, cons, 0.0).unwrap();
            assert!(rel_gap(&same, &rp0) <= 1e-9, "{method}: {}", rel_gap(&same, &rp0));
            let ident = alias_residual(method, &b, b.k(), &d.k_tilde, cons, params.lambda).unwrap();
            assert!(rel_gap(&ident, b.r()) <= 1e-9, "{method}");

            let kp = standard_normal_mat(&mut stream(41, 0, 0), 64, n);
            let rpp = alias_residual(method, &b, &kp, &d.k_tilde, cons, params.lambda).unwrap();
            let via = defended_from_parts(method, &kp, &rpp, &d.k_tilde, cons, params.lambda).unwrap();
            assert!(rel_gap(&via, &d.update.dw) <= 1e-6, "{method}: {}", rel_gap(&via, &d.update.dw));
        }
    }

    #[test]
    fn zero_alpha_keeps_residual() {
        let w = world(7);
        let c = w.exact_covariance().unwrap();
        let cons = Constraint::Covariance(&c);
        let (b, _) = w.synthesize_edit_batch(4, Method::Memit, cons, 0).unwrap();
        let rp = equivalent_residual(Method::Memit, &b, b.k(), cons, 0.0).unwrap();
        assert!(rel_gap(&rp, b.r()) < 1e-10);
    }

    #[test]
    fn degenerate_decoys_error() {
        // K̃ orthogonal to K under C = I makes G = 0.
        let c = Covariance::new(Mat::identity(3)).unwrap();
        let k = Mat::column_vector(&[1.0, 0.0, 0.0]).unwrap();
        let b = EditBatch::from_matrices(k, Mat::column_vector(&[1.0, 1.0]).unwrap()).unwrap();
        let cons = Constraint::Covariance(&c);
        let kt = Mat::column_vector(&[0.0, 1.0, 0.0]).unwrap();
        let p = DefenseParams { alpha: 1.0, lambda: 0.0, decoy_subject_ids: vec![] };
        for m in [Method::Rome, Method::Memit] {
            let up = apply_method(m, &b, cons).unwrap();
            assert!(matches!(defense_update(&up, &b, &kt, cons, &p), Err(Error::CamouflageDegenerate(_))));
        }
        assert!(matches!(equivalent_residual(Method::Memit, &b, &kt, cons, 0.0), Err(Error::ConstructionFailed(_))));
    }
}
