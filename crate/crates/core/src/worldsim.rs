// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded stand-in for a language model at one edited layer.
//!
//! A key is `k(s, t) = A_t e_s + b_t` with `A_t = I + η G_t` and `b_t = η g_t`.
//! `G_t` and `g_t` have `N(0, 1/d_in)` entries, so `η` measures the template
//! perturbation relative to the unit-norm subject embedding `e_s` whatever
//! the dimension. The next-token distribution is `softmax(U (W + ΔW) k / τ)`.

use alloc::format;
use alloc::vec::Vec;

use crate::editors::{
    apply_method, covariance_from_keys, default_ridge, nullspace_projector, Constraint, Covariance,
    EditBatch, Method, Projector, WeightUpdate,
};
use crate::error::{invalid, Error, Result};
use crate::mat::{default_rank_tol, dot, norm, Mat};
use crate::rng::{self, domain};

/// Largest number of stored reals a world may hold.
pub const MAX_WORLD_ENTRIES: usize = 1 << 26;

/// Retries after the first draw when a sampled batch is rank deficient.
pub const BATCH_RETRIES: u64 = 8;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct WorldConfig {
    pub d_in: usize,
    pub d_out: usize,
    pub vocab: usize,
    pub n_subjects: usize,
    pub n_templates: usize,
    pub eta: f64,
    pub tau: f64,
    pub beta: f64,
    /// Columns of the preserved-knowledge key matrix behind AlphaEdit's projector.
    pub n_preserved: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            d_in: 128,
            d_out: 96,
            vocab: 512,
            n_subjects: 512,
            n_templates: 16,
            eta: 0.2,
            tau: 1.0,
            beta: 10.0,
            n_preserved: 96,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_in", self.d_in),
            ("d_out", self.d_out),
            ("vocab", self.vocab),
            ("n_subjects", self.n_subjects),
            ("n_templates", self.n_templates),
        ];
        for (name, v) in dims {
            if v < 2 {
                return Err(invalid(format!("{name} must be at least 2, got {v}")));
            }
        }
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(invalid("eta must be finite and nonnegative"));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(invalid("tau must be finite and positive"));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(invalid("beta must be finite and nonnegative"));
        }
        Ok(())
    }

    fn entry_count(&self) -> Option<usize> {
        let d = self.d_in;
        let parts = [
            d.checked_mul(self.n_subjects)?,
            d.checked_mul(d)?.checked_mul(self.n_templates)?,
            d.checked_mul(self.n_templates)?,
            self.d_out.checked_mul(d)?,
            self.vocab.checked_mul(self.d_out)?,
            d.checked_mul(self.n_preserved)?,
        ];
        parts.iter().try_fold(0usize, |acc, &p| acc.checked_add(p))
    }
}

/// Immutable synthetic model. Every query is a pure function of the world.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    cfg: WorldConfig,
    subjects: Mat,
    template_maps: Vec<Mat>,
    template_offsets: Vec<Vec<f64>>,
    w: Mat,
    unembed: Mat,
    preserved: Option<Mat>,
}

pub fn new_world(cfg: &WorldConfig) -> Result<SyntheticWorld> {
    SyntheticWorld::new(cfg)
}

impl SyntheticWorld {
    pub fn new(cfg: &WorldConfig) -> Result<Self> {
        cfg.validate()?;
        match cfg.entry_count() {
            Some(n) if n <= MAX_WORLD_ENTRIES => {}
            _ => return Err(Error::Resource(format!("world exceeds {MAX_WORLD_ENTRIES} stored entries"))),
        }
        let d = cfg.d_in;
        let inv_sqrt_d = 1.0 / libm::sqrt(d as f64);
        let mut r = rng::stream(cfg.seed, domain::WORLD, 0);

        let cols: Vec<Vec<f64>> = (0..cfg.n_subjects).map(|_| rng::unit_vector(&mut r, d)).collect();
        let subjects = Mat::from_columns(&cols)?;

        let mut template_maps = Vec::with_capacity(cfg.n_templates);
        let mut template_offsets = Vec::with_capacity(cfg.n_templates);
        for _ in 0..cfg.n_templates {
            let g = rng::standard_normal_mat(&mut r, d, d);
            let a = Mat::from_fn(d, d, |i, j| {
                let e = if i == j { 1.0 } else { 0.0 };
                e + cfg.eta * inv_sqrt_d * g[(i, j)]
            });
            let b: Vec<f64> = rng::standard_normal_vec(&mut r, d).into_iter().map(|x| cfg.eta * inv_sqrt_d * x).collect();
            template_maps.push(a);
            template_offsets.push(b);
        }

        let w = rng::standard_normal_mat(&mut r, cfg.d_out, d).scale(inv_sqrt_d);
        let rows: Vec<Vec<f64>> = (0..cfg.vocab).map(|_| rng::unit_vector(&mut r, cfg.d_out)).collect();
        let unembed = Mat::from_columns(&rows)?.t();
        let preserved = if cfg.n_preserved > 0 {
            let cols: Vec<Vec<f64>> = (0..cfg.n_preserved).map(|_| rng::unit_vector(&mut r, d)).collect();
            Some(Mat::from_columns(&cols)?)
        } else {
            None
        };
        Ok(SyntheticWorld { cfg: cfg.clone(), subjects, template_maps, template_offsets, w, unembed, preserved })
    }

    /// Reassembles a world from stored parts, checking shapes against `cfg`.
    pub fn from_parts(
        cfg: WorldConfig,
        subjects: Mat,
        template_maps: Vec<Mat>,
        template_offsets: Vec<Vec<f64>>,
        w: Mat,
        unembed: Mat,
        preserved: Option<Mat>,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_in;
        let ok = subjects.shape() == (d, cfg.n_subjects)
            && template_maps.len() == cfg.n_templates
            && template_offsets.len() == cfg.n_templates
            && template_maps.iter().all(|a| a.shape() == (d, d))
            && template_offsets.iter().all(|b| b.len() == d && b.iter().all(|x| x.is_finite()))
            && w.shape() == (cfg.d_out, d)
            && unembed.shape() == (cfg.vocab, cfg.d_out)
            && match &preserved {
                Some(p) => p.shape() == (d, cfg.n_preserved),
                None => cfg.n_preserved == 0,
            };
        if !ok {
            return Err(invalid("world parts do not match the configuration"));
        }
        Ok(SyntheticWorld { cfg, subjects, template_maps, template_offsets, w, unembed, preserved })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.cfg
    }

    pub fn subject_embeddings(&self) -> &Mat {
        &self.subjects
    }

    pub fn template_maps(&self) -> &[Mat] {
        &self.template_maps
    }

    pub fn template_offsets(&self) -> &[Vec<f64>] {
        &self.template_offsets
    }

    pub fn base_weight(&self) -> &Mat {
        &self.w
    }

    pub fn unembedding(&self) -> &Mat {
        &self.unembed
    }

    pub fn preserved_keys(&self) -> Option<&Mat> {
        self.preserved.as_ref()
    }

    fn check_ids(&self, subject_id: usize, template_id: usize) -> Result<()> {
        if subject_id >= self.cfg.n_subjects {
            return Err(invalid(format!("subject id {subject_id} out of range")));
        }
        if template_id >= self.cfg.n_templates {
            return Err(invalid(format!("template id {template_id} out of range")));
        }
        Ok(())
    }

    /// `k(s, t) = A_t e_s + b_t`.
    pub fn extract_key(&self, subject_id: usize, template_id: usize) -> Result<Vec<f64>> {
        self.check_ids(subject_id, template_id)?;
        let e = self.subjects.column(subject_id);
        let mut k = self.template_maps[template_id].mul_vec(&e);
        k.iter_mut().zip(&self.template_offsets[template_id]).for_each(|(x, b)| *x += b);
        Ok(k)
    }

    /// Keys for `subject_ids[i]` under `template_ids[i]`, as columns.
    pub fn key_matrix(&self, subject_ids: &[usize], template_ids: &[usize]) -> Result<Mat> {
        if subject_ids.len() != template_ids.len() || subject_ids.is_empty() {
            return Err(invalid("need one template per subject and at least one pair"));
        }
        let cols = subject_ids
            .iter()
            .zip(template_ids)
            .map(|(&s, &t)| self.extract_key(s, t))
            .collect::<Result<Vec<_>>>()?;
        Mat::from_columns(&cols)
    }

    /// `softmax(U (W + ΔW) k(s, t) / τ)`.
    pub fn next_token_dist(&self, dw: Option<&Mat>, subject_id: usize, template_id: usize) -> Result<Vec<f64>> {
        let k = self.extract_key(subject_id, template_id)?;
        self.dist_for_key(dw, &k)
    }

    pub fn dist_for_key(&self, dw: Option<&Mat>, k: &[f64]) -> Result<Vec<f64>> {
        if k.len() != self.cfg.d_in {
            return Err(invalid("key has wrong dimension"));
        }
        let mut h = self.w.mul_vec(k);
        if let Some(dw) = dw {
            if dw.shape() != self.w.shape() {
                return Err(invalid("ΔW shape does not match W"));
            }
            h.iter_mut().zip(dw.mul_vec(k)).for_each(|(x, d)| *x += d);
        }
        let logits: Vec<f64> = self.unembed.mul_vec(&h).into_iter().map(|z| z / self.cfg.tau).collect();
        Ok(softmax(&logits))
    }

    /// Draws an edit batch and applies `method` under `constraint`.
    ///
    /// `call_index` selects the random stream, so distinct calls are
    /// independent and repeat calls are identical.
    pub fn synthesize_edit_batch(
        &self,
        n: usize,
        method: Method,
        constraint: Constraint<'_>,
        call_index: u64,
    ) -> Result<(EditBatch, WeightUpdate)> {
        let c = &self.cfg;
        if n == 0 || n > c.n_subjects || n > c.vocab || n > c.d_in || n > c.d_out {
            return Err(invalid(format!("cannot draw {n} edits from this world")));
        }
        if method == Method::Rome && n != 1 {
            return Err(invalid("ROME edits exactly one fact"));
        }
        if constraint.dim() != c.d_in {
            return Err(invalid("constraint dimension does not match d_in"));
        }
        let mut last = None;
        for attempt in 0..=BATCH_RETRIES {
            let mut r = rng::stream(c.seed, domain::BATCH, (call_index << 8) | attempt);
            let subjects = rng::sample_distinct(&mut r, c.n_subjects, n);
            let templates: Vec<usize> = (0..n).map(|_| rng::uniform_index(&mut r, c.n_templates)).collect();
            let objects = rng::sample_distinct(&mut r, c.vocab, n);
            let k = self.key_matrix(&subjects, &templates)?;
            let mut rcols = Vec::with_capacity(n);
            for i in 0..n {
                let v = self.w.mul_vec(&k.column(i));
                let scale = c.beta * norm(&v);
                rcols.push(self.unembed.row(objects[i]).iter().map(|u| scale * u).collect());
            }
            let rmat = Mat::from_columns(&rcols)?;
            let outcome = EditBatch::new(subjects, templates, objects, k, rmat)
                .and_then(|b| apply_method(method, &b, constraint).map(|u| (b, u)));
            match outcome {
                Ok(v) => return Ok(v),
                Err(e @ (Error::DegenerateBatch(_) | Error::DegenerateProjection { .. })) => last = Some(e),
                Err(e) => return Err(e),
            }
        }
        Err(Error::DegenerateBatch(format!(
            "no full-rank batch after {BATCH_RETRIES} retries: {}",
            last.map(|e| format!("{e}")).unwrap_or_default()
        )))
    }

    /// Exact second moment of keys over every (subject, template) pair.
    pub fn exact_covariance(&self) -> Result<Covariance> {
        // Σ_s (A e_s + b)(A e_s + b)ᵀ = A E Aᵀ + A m bᵀ + b mᵀ Aᵀ + S b bᵀ
        // with E = Σ e_s e_sᵀ and m = Σ e_s.
        let d = self.cfg.d_in;
        let s = self.cfg.n_subjects as f64;
        let e = self.subjects.matmul(&self.subjects.t());
        let m: Vec<f64> = (0..d).map(|i| self.subjects.row(i).iter().sum()).collect();
        let mut acc = Mat::zeros(d, d);
        for (a, b) in self.template_maps.iter().zip(&self.template_offsets) {
            let aea = a.matmul(&e).matmul(&a.t());
            let am = a.mul_vec(&m);
            let cross = Mat::from_fn(d, d, |i, j| am[i] * b[j] + b[i] * am[j] + s * b[i] * b[j]);
            acc = acc.add(&aea).add(&cross);
        }
        let count = s * self.cfg.n_templates as f64;
        Covariance::new(acc.scale(1.0 / count).symmetrize())
    }

    /// Second moment from `n_samples` random (subject, template) pairs.
    pub fn estimated_covariance(&self, n_samples: usize, call_index: u64) -> Result<Covariance> {
        if n_samples == 0 {
            return Err(invalid("need at least one sample"));
        }
        let mut r = rng::stream(self.cfg.seed, domain::COVARIANCE, call_index);
        let cols = (0..n_samples)
            .map(|_| {
                let s = rng::uniform_index(&mut r, self.cfg.n_subjects);
                let t = rng::uniform_index(&mut r, self.cfg.n_templates);
                self.extract_key(s, t)
            })
            .collect::<Result<Vec<_>>>()?;
        let kp = Mat::from_columns(&cols)?.scale(1.0 / libm::sqrt(n_samples as f64));
        covariance_from_keys(&kp, default_ridge(&kp))
    }

    /// Exact covariance of a sibling world drawn with a different seed.
    pub fn shifted_covariance(&self, seed: u64) -> Result<Covariance> {
        let cfg = WorldConfig { seed, ..self.cfg.clone() };
        SyntheticWorld::new(&cfg)?.exact_covariance()
    }

    /// Projector onto the complement of the preserved keys (identity if none).
    pub fn preserved_projector(&self) -> Result<Projector> {
        match &self.preserved {
            Some(kp) => nullspace_projector(kp, default_rank_tol(kp.rows(), kp.cols())),
            None => Ok(Projector::identity(self.cfg.d_in)),
        }
    }

    /// Entry `(i, j)`: the smallest cosine between `k(s_i, t₁)` and
    /// `k(s_j, t₂)` over all template pairs drawn from `template_ids`.
    /// The diagonal is the within-subject invariance.
    pub fn invariance_report(&self, subject_ids: &[usize], template_ids: &[usize]) -> Result<Mat> {
        if subject_ids.is_empty() || template_ids.is_empty() {
            return Err(invalid("id lists must be nonempty"));
        }
        let keys = subject_ids
            .iter()
            .map(|&s| template_ids.iter().map(|&t| self.extract_key(s, t)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let n = subject_ids.len();
        let mut out = Mat::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let mut lo = f64::INFINITY;
                for a in &keys[i] {
                    for b in &keys[j] {
                        lo = lo.min(cosine(a, b));
                    }
                }
                out[(i, j)] = lo;
                out[(j, i)] = lo;
            }
        }
        Ok(out)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d = norm(a) * norm(b);
    if d == 0.0 {
        0.0
    } else {
        dot(a, b) / d
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = logits.iter().map(|&z| libm::exp(z - m)).collect();
    let s: f64 = ex.iter().sum();
    ex.into_iter().map(|e| e / s).collect()
}

fn check_distribution(p: &[f64]) -> Result<()> {
    if p.is_empty() || p.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(invalid("probabilities must be finite and nonnegative"));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("probabilities sum to {s}")));
    }
    Ok(())
}

/// `H(p) = −Σ p ln p` in nats, with `0 ln 0 = 0`.
pub fn shannon_entropy(p: &[f64]) -> Result<f64> {
    check_distribution(p)?;
    Ok(-p.iter().filter(|&&x| x > 0.0).map(|&x| x * libm::log(x)).sum::<f64>())
}

/// Jensen-Shannon divergence in nats, in `[0, ln 2]`.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(invalid("distributions differ in length"));
    }
    check_distribution(p)?;
    check_distribution(q)?;
    let kl_to_mid = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .filter(|(&x, _)| x > 0.0)
            .map(|(&x, &y)| x * libm::log(2.0 * x / (x + y)))
            .sum()
    };
    let js = 0.5 * kl_to_mid(p, q) + 0.5 * kl_to_mid(q, p);
    Ok(js.clamp(0.0, core::f64::consts::LN_2))
}
