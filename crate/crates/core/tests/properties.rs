// SPDX-License-Identifier: MIT OR Apache-2.0

use editleak_core::camouflage::{alias_residual, camouflage, equivalent_residual, DefenseParams};
use editleak_core::editors::{
    alphaedit_update, alphaedit_update_woodbury, apply_method, covariance_from_keys, memit_update,
    memit_update_woodbury, nullspace_projector, Constraint, Covariance, EditBatch, Method,
};
use editleak_core::kster::{prompt_score, subject_inference, AttackConfig};
use editleak_core::mat::{
    default_rank_tol, numerical_rank, principal_angles, rel_gap, solve_spd, svd_thin, orthonormal_basis,
};
use editleak_core::rng::{random_orthogonal, standard_normal_mat, stream};
use editleak_core::worldsim::{js_divergence, new_world, softmax, SyntheticWorld, WorldConfig};
use editleak_core::Mat;
use proptest::prelude::*;

fn gaussian(seed: u64, rows: usize, cols: usize) -> Mat {
    standard_normal_mat(&mut stream(seed, 0, 0), rows, cols)
}

fn batch(seed: u64, d_in: usize, d_out: usize, n: usize) -> EditBatch {
    let mut r = stream(seed, 0, 1);
    let k = standard_normal_mat(&mut r, d_in, n);
    let rr = standard_normal_mat(&mut r, d_out, n);
    EditBatch::from_matrices(k, rr).unwrap()
}

fn small_world(seed: u64, beta: f64) -> SyntheticWorld {
    new_world(&WorldConfig {
        d_in: 32,
        d_out: 24,
        vocab: 64,
        n_subjects: 64,
        n_templates: 4,
        eta: 0.05,
        beta,
        n_preserved: 16,
        seed,
        ..WorldConfig::default()
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn svd_reconstructs_and_repeats(seed in any::<u64>(), rows in 1usize..24, cols in 1usize..24) {
        let m = gaussian(seed, rows, cols);
        let s = svd_thin(&m).unwrap();
        let err = s.reconstruct().max_abs_diff(&m);
        prop_assert!(err <= 1e-8 * (1.0 + s.sigma[0]), "err {}", err);
        let again = svd_thin(&m).unwrap();
        prop_assert_eq!(&s.u, &again.u);
        prop_assert_eq!(&s.sigma, &again.sigma);
        prop_assert_eq!(&s.v, &again.v);
    }

    #[test]
    fn principal_angles_symmetric(seed in any::<u64>(), d in 4usize..20, r in 1usize..4) {
        let u1 = orthonormal_basis(&gaussian(seed, d, r), r).unwrap();
        let u2 = orthonormal_basis(&gaussian(seed ^ 1, d, r), r).unwrap();
        let x = principal_angles(&u1, &u2).unwrap();
        let y = principal_angles(&u2, &u1).unwrap();
        prop_assert_eq!(x.len(), y.len());
        for (p, q) in x.iter().zip(&y) {
            prop_assert!((p - q).abs() <= 1e-10);
        }
    }

    #[test]
    fn solve_spd_recovers(seed in any::<u64>(), n in 1usize..24, log_cond in 0.0f64..8.0) {
        let q = random_orthogonal(&mut stream(seed, 0, 0), n);
        let ev: Vec<f64> = (0..n).map(|i| 10f64.powf(-log_cond * i as f64 / (n.max(2) - 1) as f64)).collect();
        let a = q.matmul(&Mat::diag(&ev)).matmul(&q.t()).symmetrize();
        let x0 = gaussian(seed ^ 7, n, 2);
        let x = solve_spd(&a, &a.matmul(&x0)).unwrap();
        let rel = x.max_abs_diff(&x0) / x0.max_abs();
        prop_assert!(rel <= 1e-6, "rel {}", rel);
    }

    #[test]
    fn woodbury_forms_agree(seed in any::<u64>(), d_in in 16usize..64, d_out in 8usize..32, n in 1usize..8) {
        let b = batch(seed, d_in, d_out, n);
        let kp = gaussian(seed ^ 3, d_in, 2 * d_in);
        let c = covariance_from_keys(&kp, 1e-3).unwrap();
        let direct = memit_update(&b, &c).unwrap().dw;
        let wood = memit_update_woodbury(&b, &c).unwrap().dw;
        prop_assert!(rel_gap(&wood, &direct) <= 1e-8);
        let p = nullspace_projector(&gaussian(seed ^ 5, d_in, d_in / 2), 1e-10).unwrap();
        let direct = alphaedit_update(&b, &p).unwrap().dw;
        let wood = alphaedit_update_woodbury(&b, &p).unwrap().dw;
        prop_assert!(rel_gap(&wood, &direct) <= 1e-8);
    }

    #[test]
    fn update_rank_equals_batch_size(seed in any::<u64>(), n in 1usize..10) {
        let b = batch(seed, 40, 30, n);
        let c = covariance_from_keys(&gaussian(seed ^ 3, 40, 80), 1e-3).unwrap();
        let p = nullspace_projector(&gaussian(seed ^ 5, 40, 16), 1e-10).unwrap();
        for (m, cons) in [(Method::Memit, Constraint::Covariance(&c)), (Method::AlphaEdit, Constraint::NullSpace(&p))] {
            let dw = apply_method(m, &b, cons).unwrap().dw;
            let s = svd_thin(&dw).unwrap();
            prop_assert_eq!(numerical_rank(&s.sigma, default_rank_tol(40, 30)).unwrap(), n);
        }
    }

    #[test]
    fn alphaedit_ignores_protected_directions(seed in any::<u64>(), n in 1usize..6) {
        let d = 32;
        let kp = gaussian(seed ^ 5, d, 12);
        let p = nullspace_projector(&kp, 1e-10).unwrap();
        let b = batch(seed, d, 20, n);
        // ΔK in col(Kp) so P ΔK = 0.
        let dk = kp.matmul(&gaussian(seed ^ 9, 12, n));
        prop_assert!(p.apply(&dk).max_abs() <= 1e-12 * (1.0 + dk.max_abs()));
        let shifted = EditBatch::from_matrices(b.k().add(&dk), b.r().clone()).unwrap();
        let a = alphaedit_update_woodbury(&b, &p).unwrap().dw;
        let z = alphaedit_update_woodbury(&shifted, &p).unwrap().dw;
        prop_assert!(z.max_abs_diff(&a) <= 1e-8 * (1.0 + a.max_abs()));
    }

    #[test]
    fn js_is_symmetric_and_bounded(seed in any::<u64>(), n in 2usize..32) {
        let mut r = stream(seed, 0, 0);
        let p = softmax(&standard_normal_mat(&mut r, 1, n).row(0));
        let q = softmax(&standard_normal_mat(&mut r, 1, n).row(0).iter().map(|x| 3.0 * x).collect::<Vec<_>>());
        let a = js_divergence(&p, &q).unwrap();
        let b = js_divergence(&q, &p).unwrap();
        prop_assert!((a - b).abs() <= 1e-14);
        prop_assert!(a >= 0.0 && a <= core::f64::consts::LN_2 + 1e-15);
    }

    #[test]
    fn subject_ranking_is_scale_free(seed in 0u64..1000, scale in 1e-3f64..1e3) {
        let w = small_world(seed, 10.0);
        let c = w.exact_covariance().unwrap();
        let cons = Constraint::Covariance(&c);
        let (_, up) = w.synthesize_edit_batch(3, Method::Memit, cons, 0).unwrap();
        let cfg = AttackConfig::default();
        let a = subject_inference(&w, &up, Some(cons), &cfg).unwrap();
        let mut scaled = up.clone();
        scaled.dw = up.dw.scale(scale);
        let b = subject_inference(&w, &scaled, Some(cons), &cfg).unwrap();
        // Edited keys all score 1 up to rounding, so only order beyond that
        // noise is meaningful.
        let rho = |r: &editleak_core::kster::AttackReport| {
            let mut v: Vec<(usize, f64)> = r.subject_scores.iter().map(|s| (s.subject_id, s.rho)).collect();
            v.sort_by_key(|x| x.0);
            v
        };
        let (ra, rb) = (rho(&a), rho(&b));
        for (x, y) in ra.iter().zip(&rb) {
            prop_assert!((x.1 - y.1).abs() <= 1e-12);
        }
        let mut pa = a.predicted_subjects.clone();
        let mut pb = b.predicted_subjects.clone();
        pa.sort_unstable();
        pb.sort_unstable();
        prop_assert_eq!(pa, pb);
        for w2 in b.subject_scores.windows(2) {
            let (hi, lo) = (ra[w2[0].subject_id].1, ra[w2[1].subject_id].1);
            prop_assert!(hi >= lo - 1e-12);
        }
    }

    #[test]
    fn defense_keeps_edits_and_residuals_hold(seed in 0u64..1000, alpha in 0.0f64..5.0) {
        let w = small_world(seed, 10.0);
        let c = w.exact_covariance().unwrap();
        let cons = Constraint::Covariance(&c);
        let (b, up) = w.synthesize_edit_batch(3, Method::Memit, cons, 0).unwrap();
        let params = DefenseParams { alpha, ..DefenseParams::default() };
        let d = camouflage(&w, &b, &up, cons, &params, 0, 0).unwrap();
        prop_assert!(d.consistency <= 1e-6, "consistency {}", d.consistency);
        // Without the ridge, K′ = K̃ reproduces R′ by direct substitution.
        let rp = equivalent_residual(Method::Memit, &b, &d.k_tilde, cons, 0.0).unwrap();
        let same = alias_residual(Method::Memit, &b, &d.k_tilde, &d.k_tilde, cons, 0.0).unwrap();
        prop_assert!(rel_gap(&same, &rp) <= 1e-8);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 16, ..ProptestConfig::default() })]

    #[test]
    fn prompt_score_grows_with_beta(seed in 0u64..1000, lo in 5.0f64..15.0, step in 0.0f64..10.0) {
        let score = |beta: f64| {
            let w = small_world(seed, beta);
            let c: Covariance = w.exact_covariance().unwrap();
            let (b, up) = w.synthesize_edit_batch(2, Method::Memit, Constraint::Covariance(&c), 0).unwrap();
            (b.subject_ids.clone(), b.template_ids.clone(), prompt_score(&w, &up, b.subject_ids[0], b.template_ids[0], 1e-9).unwrap())
        };
        let (s1, t1, a) = score(lo);
        let (s2, t2, b) = score(lo + step);
        prop_assert_eq!((s1, t1), (s2, t2));
        prop_assert!(b >= a - 1e-12, "score {} at beta {} vs {} at {}", a, lo, b, lo + step);
    }
}
