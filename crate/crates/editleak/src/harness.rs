// SPDX-License-Identifier: MIT OR Apache-2.0

//! Experiment drivers behind the CLI subcommands.
//!
//! Trial `i` runs in its own world seeded by `derive_seed(seed, TRIAL, i)`,
//! so outputs do not depend on thread count or scheduling. Aggregates are
//! folded in trial order.

use std::fs;
use std::path::Path;

use editleak_core::camouflage::{camouflage, DefenseParams};
use editleak_core::editors::{Constraint, Covariance, EditBatch, Method, Projector, WeightUpdate};
use editleak_core::kster::{eval_metrics, run_attack, AttackReport, RecallTable};
use editleak_core::rng::{derive_seed, domain};
use editleak_core::verify::{
    check_defense_theorems, check_degeneration, check_noisy_cov_bound, check_subspace_recovery, check_woodbury,
    CheckResult,
};
use editleak_core::worldsim::{new_world, SyntheticWorld, WorldConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{CovMode, ExperimentConfig};
use crate::error::{HarnessError, Result};
use crate::textfmt::{world_document, write_matrix};

pub const THREADS_ENV: &str = "EDITLEAK_THREADS";
pub const RUN_CSV: &str = "run.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_JSON: &str = "sweep.json";
pub const VERIFY_JSONL: &str = "verify.jsonl";
pub const WORLD_TXT: &str = "world.txt";

/// Camouflage scale used by `verify` when the config has no defense.
pub const VERIFY_ALPHA: f64 = 3.0;
/// Noise scales for the covariance check: inside and outside the guarantee.
pub const VERIFY_NOISE_SCALES: [f64; 2] = [0.5, 4.0];

/// Pool capped by `EDITLEAK_THREADS` when set.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| HarnessError::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        b = b.num_threads(n);
    }
    b.build().map_err(|e| HarnessError::Output(e.to_string()))
}

pub fn trial_seed(seed: u64, trial: usize) -> u64 {
    derive_seed(seed, domain::TRIAL, trial as u64)
}

pub fn trial_world(cfg: &ExperimentConfig, trial: usize) -> Result<(u64, SyntheticWorld)> {
    let seed = trial_seed(cfg.world.seed, trial);
    let world = new_world(&WorldConfig { seed, ..cfg.world.clone() })?;
    Ok((seed, world))
}

/// The editor's own constraint: exact `C`, or `P` for AlphaEdit.
pub enum Preservation {
    Covariance(Covariance),
    NullSpace(Projector),
}

impl Preservation {
    pub fn for_method(world: &SyntheticWorld, method: Method) -> Result<Self> {
        Ok(match method {
            Method::AlphaEdit => Preservation::NullSpace(world.preserved_projector()?),
            _ => Preservation::Covariance(world.exact_covariance()?),
        })
    }

    pub fn constraint(&self) -> Constraint<'_> {
        match self {
            Preservation::Covariance(c) => Constraint::Covariance(c),
            Preservation::NullSpace(p) => Constraint::NullSpace(p),
        }
    }
}

/// The attacker's covariance under `mode`; AlphaEdit attacks ignore it.
pub fn attacker_covariance(world: &SyntheticWorld, exact: &Covariance, mode: CovMode) -> Result<Covariance> {
    Ok(match mode {
        CovMode::Exact => exact.clone(),
        CovMode::Estimated(n) => world.estimated_covariance(n, 0)?,
        CovMode::Shifted(s) => world.shifted_covariance(s)?,
    })
}

/// One CSV row per trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub trial: usize,
    pub seed: u64,
    pub method: Method,
    pub n: usize,
    pub recall_at_n: f64,
    pub mean_rank: f64,
    pub top1: f64,
    pub top5: f64,
    pub top20: f64,
}

#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub row: TrialRow,
    pub batch: EditBatch,
    pub update: WeightUpdate,
    pub report: AttackReport,
    pub metrics: RecallTable,
    /// Consistency residual of the defended update, when one was built.
    pub consistency: Option<f64>,
}

/// Edit, optionally camouflage with `defense`, attack, score.
pub fn run_trial(cfg: &ExperimentConfig, trial: usize, defense: Option<&DefenseParams>) -> Result<TrialOutcome> {
    let (seed, world) = trial_world(cfg, trial)?;
    let pres = Preservation::for_method(&world, cfg.method)?;
    let cons = pres.constraint();
    let (batch, dw) = world.synthesize_edit_batch(cfg.n_edits, cfg.method, cons, 0)?;
    let (update, consistency) = match defense {
        Some(p) => {
            let d = camouflage(&world, &batch, &dw, cons, p, cfg.attack.generic_template_id, 0)?;
            (d.update, Some(d.consistency))
        }
        None => (dw, None),
    };
    let attacker_c;
    let attack_cons = match &pres {
        Preservation::Covariance(c) => {
            attacker_c = attacker_covariance(&world, c, cfg.cov_mode)?;
            Constraint::Covariance(&attacker_c)
        }
        Preservation::NullSpace(p) => Constraint::NullSpace(p),
    };
    let mut report = run_attack(&world, &update, Some(attack_cons), &cfg.attack)?;
    let metrics = eval_metrics(&report, &batch)?;
    report.metrics = Some(metrics.clone());
    let row = TrialRow {
        trial,
        seed,
        method: cfg.method,
        n: cfg.n_edits,
        recall_at_n: metrics.subject_recall_at_n,
        mean_rank: metrics.mean_true_rank,
        top1: metrics.prompt_top1,
        top5: metrics.prompt_top5,
        top20: metrics.prompt_top20,
    };
    Ok(TrialOutcome { row, batch, update, report, metrics, consistency })
}

/// All trials in parallel, returned in trial order.
pub fn run_trials(cfg: &ExperimentConfig, defense: Option<&DefenseParams>) -> Result<Vec<TrialOutcome>> {
    cfg.validate()?;
    let pool = thread_pool()?;
    pool.install(|| (0..cfg.trials).into_par_iter().map(|t| run_trial(cfg, t, defense)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Population standard deviation over trials.
    pub std: f64,
}

impl Stat {
    pub fn of(xs: impl IntoIterator<Item = f64>) -> Stat {
        let xs: Vec<f64> = xs.into_iter().collect();
        if xs.is_empty() {
            return Stat { mean: f64::NAN, std: f64::NAN };
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Stat { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub n_edits: usize,
    pub trials: usize,
    pub seed: u64,
    pub cov_mode: String,
    pub alpha: Option<f64>,
    pub recall_at_n: Stat,
    pub mean_rank: Stat,
    pub top1: Stat,
    pub top5: Stat,
    pub top20: Stat,
    /// Trials whose recovered edit count differs from the true one.
    pub n_hat_mismatches: usize,
    pub max_consistency_residual: Option<f64>,
}

pub fn summarize(cfg: &ExperimentConfig, alpha: Option<f64>, outcomes: &[TrialOutcome]) -> RunSummary {
    let col = |f: fn(&TrialRow) -> f64| Stat::of(outcomes.iter().map(|o| f(&o.row)));
    let residuals: Vec<f64> = outcomes.iter().filter_map(|o| o.consistency).collect();
    RunSummary {
        method: cfg.method,
        n_edits: cfg.n_edits,
        trials: outcomes.len(),
        seed: cfg.world.seed,
        cov_mode: cfg.cov_mode.to_string(),
        alpha,
        recall_at_n: col(|r| r.recall_at_n),
        mean_rank: col(|r| r.mean_rank),
        top1: col(|r| r.top1),
        top5: col(|r| r.top5),
        top20: col(|r| r.top20),
        n_hat_mismatches: outcomes.iter().filter(|o| o.report.n_hat != o.batch.n()).count(),
        max_consistency_residual: residuals.into_iter().reduce(f64::max),
    }
}

fn ensure_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| HarnessError::Output(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn csv_text<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| HarnessError::Output(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Output(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| HarnessError::Output(e.to_string()))
}

/// Writes the configured world and its exact covariance.
pub fn cmd_world(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    ensure_dir(out)?;
    let world = new_world(&cfg.world)?;
    write(&out.join(WORLD_TXT), &world_document(&world)?.render())?;
    write(&out.join("covariance.txt"), &write_matrix(world.exact_covariance()?.matrix()))
}

/// Per-trial CSV, JSON summary, and the first trial's attack report.
pub fn cmd_run(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    let outcomes = run_trials(cfg, cfg.defense.as_ref())?;
    let summary = summarize(cfg, cfg.defense.as_ref().map(|d| d.alpha), &outcomes);
    ensure_dir(out)?;
    let rows: Vec<TrialRow> = outcomes.iter().map(|o| o.row.clone()).collect();
    write(&out.join(RUN_CSV), &csv_text(&rows)?)?;
    write(&out.join(SUMMARY_JSON), &to_json(&summary)?)?;
    if let Some(first) = outcomes.first() {
        write(&out.join("report_trial0.json"), &to_json(&first.report)?)?;
        write(&out.join("update_trial0.txt"), &write_matrix(&first.update.dw))?;
    }
    Ok(summary)
}

/// One line of `sweep.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub mean_rank: f64,
    pub rank_std: f64,
    pub recall: f64,
    pub consistency_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub summaries: Vec<RunSummary>,
}

pub fn parse_alphas(s: &str) -> Result<Vec<f64>> {
    let v = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().ok().filter(|a| a.is_finite() && *a >= 0.0))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| HarnessError::Config(format!("--alphas needs nonnegative numbers, got {s:?}")))?;
    if v.is_empty() {
        return Err(HarnessError::Config("--alphas is empty".into()));
    }
    Ok(v)
}

/// Camouflage at each `α` with decoys fixed per trial, then attack.
pub fn sweep_alpha(cfg: &ExperimentConfig, alphas: &[f64]) -> Result<SweepResult> {
    let base = cfg.defense.clone().ok_or_else(|| HarnessError::Config("sweep needs a [defense] section".into()))?;
    if alphas.is_empty() {
        return Err(HarnessError::Config("no alphas to sweep".into()));
    }
    let mut rows = Vec::with_capacity(alphas.len());
    let mut summaries = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let params = DefenseParams { alpha, ..base.clone() };
        let outcomes = run_trials(cfg, Some(&params))?;
        let s = summarize(cfg, Some(alpha), &outcomes);
        rows.push(SweepRow {
            alpha,
            mean_rank: s.mean_rank.mean,
            rank_std: s.mean_rank.std,
            recall: s.recall_at_n.mean,
            consistency_residual: s.max_consistency_residual.unwrap_or(f64::NAN),
        });
        summaries.push(s);
    }
    Ok(SweepResult { rows, summaries })
}

pub fn cmd_sweep_alpha(cfg: &ExperimentConfig, alphas: &[f64], out: &Path) -> Result<SweepResult> {
    let res = sweep_alpha(cfg, alphas)?;
    ensure_dir(out)?;
    write(&out.join(SWEEP_CSV), &csv_text(&res.rows)?)?;
    write(&out.join(SWEEP_JSON), &to_json(&res)?)?;
    Ok(res)
}

/// Edit count used by `verify` for the multi-edit methods.
fn verify_batch_size(cfg: &ExperimentConfig) -> usize {
    if cfg.method == Method::Rome {
        8
    } else {
        cfg.n_edits
    }
}

/// Every check for every method it applies to, in a fixed order.
pub fn verify_suite(cfg: &ExperimentConfig) -> Result<Vec<CheckResult>> {
    cfg.validate()?;
    let world = new_world(&cfg.world)?;
    let n = verify_batch_size(cfg);
    let c = world.exact_covariance()?;
    let p = world.preserved_projector()?;
    let params = cfg.defense.clone().unwrap_or(DefenseParams { alpha: VERIFY_ALPHA, ..DefenseParams::default() });
    let template = cfg.attack.generic_template_id;

    let pool = thread_pool()?;
    let per_method: Vec<Result<Vec<CheckResult>>> = pool.install(|| {
        Method::ALL
            .par_iter()
            .map(|&m| {
                let cons = match m {
                    Method::AlphaEdit => Constraint::NullSpace(&p),
                    _ => Constraint::Covariance(&c),
                };
                let size = if m == Method::Rome { 1 } else { n };
                let (batch, dw) = world.synthesize_edit_batch(size, m, cons, 0)?;
                let mut out = Vec::new();
                if m == Method::Memit {
                    out.push(check_woodbury(&batch, &c, &p));
                }
                out.push(check_subspace_recovery(&batch, cons, m));
                if let Constraint::Covariance(c) = cons {
                    for (i, scale) in VERIFY_NOISE_SCALES.into_iter().enumerate() {
                        out.push(check_noisy_cov_bound(&world, &batch, m, c, scale, &cfg.attack, i as u64));
                    }
                }
                out.extend(check_defense_theorems(&world, &batch, &dw, &params, cons, template, 0));
                out.push(check_degeneration(&world, &batch, &dw, cons, template, 0));
                Ok(out)
            })
            .collect()
    });
    let mut all = Vec::new();
    for r in per_method {
        all.extend(r?);
    }
    Ok(all)
}

/// Runs the suite and writes one JSON object per check.
pub fn cmd_verify(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<CheckResult>> {
    let results = verify_suite(cfg)?;
    ensure_dir(out)?;
    let mut text = String::new();
    for r in &results {
        text.push_str(&serde_json::to_string(r).map_err(|e| HarnessError::Output(e.to_string()))?);
        text.push('\n');
    }
    write(&out.join(VERIFY_JSONL), &text)?;
    Ok(results)
}

/// Fixed-width table of check outcomes.
pub fn render_checks(results: &[CheckResult]) -> String {
    let mut s = format!("{:<28} {:<10} {:<6} {:>12} {:>12}\n", "check", "method", "status", "witness", "tolerance");
    for r in results {
        let status = match (r.passed, r.asserted) {
            (true, _) => "pass",
            (false, true) => "FAIL",
            (false, false) => "note",
        };
        let method = r.method.map_or("-", |m| m.name());
        s.push_str(&format!("{:<28} {:<10} {:<6} {:>12.3e} {:>12.3e}  {}\n", r.name, method, status, r.witness, r.tolerance, r.detail));
    }
    s
}
