// SPDX-License-Identifier: MIT OR Apache-2.0

//! Key-space attack on a weight delta.
//!
//! Stage I reads the edit count off `rank(ΔW)`, takes the top right singular
//! vectors of `ΔW C` (or of `ΔW` itself for AlphaEdit) as a basis for the
//! edited keys, and ranks candidate subjects by how much of their generic
//! key falls inside that basis. Stage II ranks prompts for each predicted
//! subject by relative entropy reduction of the next-token distribution.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use crate::editors::{Constraint, EditBatch, Method, Projector, WeightUpdate};
use crate::error::{invalid, Error, Result};
use crate::mat::{default_rank_tol, norm, numerical_rank, svd_thin, Mat, SvdResult};
use crate::worldsim::{js_divergence, shannon_entropy, SyntheticWorld};

pub const DEFAULT_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct AttackConfig {
    /// Relative rank tolerance; `None` uses [`default_rank_tol`] for the matrix at hand.
    pub rank_rel_tol: Option<f64>,
    pub generic_template_id: usize,
    /// Candidate subjects. Empty means every subject in the world.
    pub subject_candidates: Vec<usize>,
    /// Candidate templates. Empty means every template in the world.
    pub prompt_candidates: Vec<usize>,
    /// Templates kept per predicted subject.
    pub n_r: usize,
    pub epsilon: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            rank_rel_tol: None,
            generic_template_id: 0,
            subject_candidates: Vec::new(),
            prompt_candidates: Vec::new(),
            n_r: 20,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.rank_rel_tol {
            if !(t > 0.0) || !t.is_finite() {
                return Err(invalid("rank_rel_tol must be positive"));
            }
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(invalid("epsilon must be positive"));
        }
        if self.n_r == 0 {
            return Err(invalid("n_r must be at least 1"));
        }
        Ok(())
    }

    pub fn subjects(&self, world: &SyntheticWorld) -> Vec<usize> {
        if self.subject_candidates.is_empty() {
            (0..world.config().n_subjects).collect()
        } else {
            self.subject_candidates.clone()
        }
    }

    pub fn templates(&self, world: &SyntheticWorld) -> Vec<usize> {
        if self.prompt_candidates.is_empty() {
            (0..world.config().n_templates).collect()
        } else {
            self.prompt_candidates.clone()
        }
    }

    fn tol(&self, m: &Mat) -> f64 {
        self.rank_rel_tol.unwrap_or_else(|| default_rank_tol(m.rows(), m.cols()))
    }
}

/// Projection coefficient of one candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SubjectScore {
    pub subject_id: usize,
    pub rho: f64,
    /// The projected key vanished; `rho` is reported as 0.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RecallTable {
    pub subject_recall_at_n: f64,
    pub prompt_top1: f64,
    pub prompt_top5: f64,
    pub prompt_top20: f64,
    /// 1-based rank of each true subject, in batch order.
    pub true_subject_ranks: Vec<usize>,
    pub mean_true_rank: f64,
    pub mean_projection_coeff: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AttackReport {
    pub method: Method,
    /// `rank(ΔW)`.
    pub n_hat: usize,
    /// `rank(M)`; smaller than `n_hat` only under an inexact covariance.
    pub rank_m: usize,
    /// Set when `rank_m < n_hat`; the attack then truncates to `rank_m`.
    pub rank_discrepancy: bool,
    /// Recovered key-space basis `V_N`; absent when `ΔW = 0`.
    #[cfg_attr(feature = "serde", serde(skip))]
    pub basis: Option<Mat>,
    /// Sorted by `rho` descending, ties by ascending subject id.
    pub subject_scores: Vec<SubjectScore>,
    pub predicted_subjects: Vec<usize>,
    /// Per predicted subject: `(template_id, score)` sorted descending.
    pub prompt_rankings: BTreeMap<usize, Vec<(usize, f64)>>,
    pub metrics: Option<RecallTable>,
}

/// `N̂ = rank(ΔW)`.
pub fn estimate_edit_count(dw: &WeightUpdate, rel_tol: Option<f64>) -> Result<usize> {
    let s = svd_thin(&dw.dw)?;
    numerical_rank(&s.sigma, rel_tol.unwrap_or_else(|| default_rank_tol(dw.dw.rows(), dw.dw.cols())))
}

/// `M = ΔW C` under a covariance, `M = ΔW` under a projector.
fn attack_matrix(dw: &WeightUpdate, constraint: Option<Constraint<'_>>) -> Result<Mat> {
    match constraint {
        Some(Constraint::Covariance(c)) => {
            if c.dim() != dw.dw.cols() {
                return Err(invalid("covariance dimension does not match ΔW"));
            }
            Ok(dw.dw.matmul(c.matrix()))
        }
        _ => Ok(dw.dw.clone()),
    }
}

/// Top-`n` right singular vectors of `M`.
pub fn recover_key_space(dw: &WeightUpdate, c: Option<&crate::editors::Covariance>, n: usize) -> Result<Mat> {
    let m = attack_matrix(dw, c.map(Constraint::Covariance))?;
    let s = svd_thin(&m)?;
    let available = numerical_rank(&s.sigma, default_rank_tol(m.rows(), m.cols()))?;
    if n == 0 || n > available {
        return Err(Error::InsufficientRank { requested: n, available });
    }
    Ok(s.v.leading_columns(n))
}

/// `ρ = ‖V_Nᵀ k‖ / ‖k‖`, with `k ← P k` when a projector is supplied.
pub fn score_subject(v_n: &Mat, k: &[f64], p: Option<&Projector>) -> Result<SubjectScore> {
    if k.len() != v_n.rows() {
        return Err(invalid("key dimension does not match basis"));
    }
    if k.iter().all(|&x| x == 0.0) {
        return Err(invalid("candidate key is zero"));
    }
    let kk = match p {
        Some(p) => p.apply_vec(k),
        None => k.to_vec(),
    };
    let nk = norm(&kk);
    // Relative to the unprojected key: a key that lies in the protected
    // span carries no usable signal.
    if nk <= 1e-12 * norm(k) {
        return Ok(SubjectScore { subject_id: 0, rho: 0.0, degenerate: true });
    }
    let rho = norm(&v_n.tmul_vec(&kk)) / nk;
    Ok(SubjectScore { subject_id: 0, rho: rho.clamp(0.0, 1.0), degenerate: false })
}

fn sort_scores(scores: &mut [SubjectScore]) {
    scores.sort_by(|a, b| b.rho.partial_cmp(&a.rho).unwrap().then(a.subject_id.cmp(&b.subject_id)));
}

fn sort_pairs(v: &mut [(usize, f64)]) {
    v.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
}

/// Stage I: edit count, key-space basis, candidate ranking.
pub fn subject_inference(
    world: &SyntheticWorld,
    dw: &WeightUpdate,
    constraint: Option<Constraint<'_>>,
    cfg: &AttackConfig,
) -> Result<AttackReport> {
    cfg.validate()?;
    let candidates = cfg.subjects(world);
    if candidates.is_empty() {
        return Err(invalid("candidate pool is empty"));
    }
    let n_hat = estimate_edit_count(dw, cfg.rank_rel_tol)?;
    let mut report = AttackReport {
        method: dw.method,
        n_hat,
        rank_m: 0,
        rank_discrepancy: false,
        basis: None,
        subject_scores: Vec::new(),
        predicted_subjects: Vec::new(),
        prompt_rankings: BTreeMap::new(),
        metrics: None,
    };
    if n_hat == 0 {
        return Ok(report);
    }
    let m = attack_matrix(dw, constraint)?;
    let svd: SvdResult = svd_thin(&m)?;
    let rank_m = numerical_rank(&svd.sigma, cfg.tol(&m))?;
    let n_use = n_hat.min(rank_m);
    report.rank_m = rank_m;
    report.rank_discrepancy = rank_m < n_hat;
    if n_use == 0 {
        return Ok(report);
    }
    let basis = svd.v.leading_columns(n_use);
    let projector = match constraint {
        Some(Constraint::NullSpace(p)) => Some(p),
        _ => None,
    };
    let mut scores = Vec::with_capacity(candidates.len());
    for &s in &candidates {
        let k = world.extract_key(s, cfg.generic_template_id)?;
        let mut sc = score_subject(&basis, &k, projector)?;
        sc.subject_id = s;
        scores.push(sc);
    }
    sort_scores(&mut scores);
    report.predicted_subjects = scores.iter().take(n_use).map(|s| s.subject_id).collect();
    report.subject_scores = scores;
    report.basis = Some(basis);
    Ok(report)
}

/// `(H(θ) − H(θ′)) / (H(θ′) + ε)` at `(subject, template)`.
pub fn prompt_score(world: &SyntheticWorld, dw: &WeightUpdate, subject_id: usize, template_id: usize, epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(invalid("epsilon must be positive"));
    }
    let h_pre = shannon_entropy(&world.next_token_dist(None, subject_id, template_id)?)?;
    let h_post = shannon_entropy(&world.next_token_dist(Some(&dw.dw), subject_id, template_id)?)?;
    Ok((h_pre - h_post) / (h_post + epsilon))
}

/// Stage II: top-`n_r` templates for every predicted subject.
pub fn prompt_recovery(
    world: &SyntheticWorld,
    dw: &WeightUpdate,
    predicted: &[usize],
    cfg: &AttackConfig,
) -> Result<BTreeMap<usize, Vec<(usize, f64)>>> {
    let templates = cfg.templates(world);
    let mut out = BTreeMap::new();
    for &s in predicted {
        let mut ranked = templates
            .iter()
            .map(|&t| prompt_score(world, dw, s, t, cfg.epsilon).map(|x| (t, x)))
            .collect::<Result<Vec<_>>>()?;
        sort_pairs(&mut ranked);
        ranked.truncate(cfg.n_r);
        out.insert(s, ranked);
    }
    Ok(out)
}

/// Both stages.
pub fn run_attack(
    world: &SyntheticWorld,
    dw: &WeightUpdate,
    constraint: Option<Constraint<'_>>,
    cfg: &AttackConfig,
) -> Result<AttackReport> {
    let mut report = subject_inference(world, dw, constraint, cfg)?;
    report.prompt_rankings = prompt_recovery(world, dw, &report.predicted_subjects, cfg)?;
    Ok(report)
}

/// Gray-box baseline: `JS(p_θ ‖ p_θ′)` per candidate under the generic
/// template, sorted descending with ties by ascending id.
pub fn graybox_scores(world: &SyntheticWorld, dw: &WeightUpdate, cfg: &AttackConfig) -> Result<Vec<(usize, f64)>> {
    let candidates = cfg.subjects(world);
    if candidates.is_empty() {
        return Err(invalid("candidate pool is empty"));
    }
    let mut out = candidates
        .iter()
        .map(|&s| {
            let k = world.extract_key(s, cfg.generic_template_id)?;
            let p = world.dist_for_key(None, &k)?;
            let q = world.dist_for_key(Some(&dw.dw), &k)?;
            Ok((s, js_divergence(&p, &q)?))
        })
        .collect::<Result<Vec<_>>>()?;
    sort_pairs(&mut out);
    Ok(out)
}

/// Fraction of `truth` among the first `n` entries of a ranked list.
pub fn recall_at(ranked: &[usize], truth: &[usize], n: usize) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let top = &ranked[..n.min(ranked.len())];
    truth.iter().filter(|t| top.contains(t)).count() as f64 / truth.len() as f64
}

/// Scores the report against the batch that produced the update.
pub fn eval_metrics(report: &AttackReport, truth: &EditBatch) -> Result<RecallTable> {
    let n = truth.n();
    let position: BTreeMap<usize, usize> =
        report.subject_scores.iter().enumerate().map(|(i, s)| (s.subject_id, i)).collect();
    if report.n_hat > 0 {
        if let Some(missing) = truth.subject_ids.iter().find(|s| !position.contains_key(s)) {
            return Err(invalid(format!("edited subject {missing} is not among the candidates")));
        }
    }
    let subject_recall_at_n = recall_at(&report.predicted_subjects, &truth.subject_ids, report.predicted_subjects.len());

    let mut hits = [0usize; 3];
    for (&s, &t) in truth.subject_ids.iter().zip(&truth.template_ids) {
        let rank = report
            .prompt_rankings
            .get(&s)
            .and_then(|list| list.iter().position(|&(tid, _)| tid == t));
        if let Some(r) = rank {
            for (h, k) in hits.iter_mut().zip([1, 5, 20]) {
                if r < k {
                    *h += 1;
                }
            }
        }
    }
    let frac = |h: usize| h as f64 / n as f64;

    // With ΔW = 0 nothing is ranked; every true subject sits past the end.
    let worst = report.subject_scores.len().max(1);
    let true_subject_ranks: Vec<usize> =
        truth.subject_ids.iter().map(|s| position.get(s).map_or(worst, |&p| p + 1)).collect();
    let mean_true_rank = true_subject_ranks.iter().sum::<usize>() as f64 / n as f64;
    let mean_projection_coeff = truth
        .subject_ids
        .iter()
        .map(|s| position.get(s).map_or(0.0, |&p| report.subject_scores[p].rho))
        .sum::<f64>()
        / n as f64;
    Ok(RecallTable {
        subject_recall_at_n,
        prompt_top1: frac(hits[0]),
        prompt_top5: frac(hits[1]),
        prompt_top20: frac(hits[2]),
        true_subject_ranks,
        mean_true_rank,
        mean_projection_coeff,
    })
}

/// Angle-gap statistics of candidate keys relative to a subspace.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Separability {
    /// `min φ(non-edited) − max φ(edited)`; positive means separable.
    pub delta_theta: f64,
    pub max_edited_angle: f64,
    pub min_other_angle: f64,
}

/// Measures `δθ` for generic-template keys against `col(basis)`.
///
/// `basis` needs orthonormal columns. With a projector, keys are projected
/// first, matching the AlphaEdit scoring rule.
pub fn measure_separability(
    world: &SyntheticWorld,
    basis: &Mat,
    edited: &[usize],
    cfg: &AttackConfig,
    p: Option<&Projector>,
) -> Result<Separability> {
    let mut max_edited: f64 = 0.0;
    let mut min_other = core::f64::consts::FRAC_PI_2;
    let mut any_other = false;
    for s in cfg.subjects(world) {
        let k = world.extract_key(s, cfg.generic_template_id)?;
        let sc = score_subject(basis, &k, p)?;
        let phi = libm::acos(sc.rho);
        if edited.contains(&s) {
            max_edited = max_edited.max(phi);
        } else {
            any_other = true;
            min_other = min_other.min(phi);
        }
    }
    if !any_other {
        return Err(invalid("no non-edited candidates to separate from"));
    }
    Ok(Separability { delta_theta: min_other - max_edited, max_edited_angle: max_edited, min_other_angle: min_other })
}

/// `arccos ρ₍ₙ₊₁₎ − arccos ρ₍ₙ₎` over sorted scores.
pub fn angle_gap(scores: &[SubjectScore], n: usize) -> Option<f64> {
    if n == 0 || scores.len() <= n {
        return None;
    }
    Some(libm::acos(scores[n].rho) - libm::acos(scores[n - 1].rho))
}
