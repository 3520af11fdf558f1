// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use editleak::harness::{cmd_run, cmd_sweep_alpha, cmd_verify, cmd_world, parse_alphas, render_checks};
use editleak::{ExperimentConfig, HarnessError};

#[derive(Parser)]
#[command(name = "editleak", version, about = "Edit forensics and camouflage on a synthetic language-model world")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the world document and its exact covariance.
    World(Common),
    /// Edit, attack and score for every trial.
    Run(Common),
    /// Attack camouflaged updates over a list of scales.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "0,1,3,5")]
        alphas: String,
    },
    /// Run the numeric theorem checks.
    Verify(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `world.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `trials`.
    #[arg(long)]
    trials: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, HarnessError> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.world.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if let Some(t) = self.trials {
            cfg.trials = t;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<bool, HarnessError> {
    match cli.cmd {
        Cmd::World(c) => {
            let cfg = c.load()?;
            cmd_world(&cfg, &cfg.out_dir)?;
            println!("world written to {}", cfg.out_dir.display());
        }
        Cmd::Run(c) => {
            let cfg = c.load()?;
            let s = cmd_run(&cfg, &cfg.out_dir)?;
            println!(
                "{} n={} trials={}: recall@n {:.4} ± {:.4}, mean rank {:.2} ± {:.2}, top1 {:.3}, top5 {:.3}, top20 {:.3}",
                s.method, s.n_edits, s.trials, s.recall_at_n.mean, s.recall_at_n.std, s.mean_rank.mean, s.mean_rank.std,
                s.top1.mean, s.top5.mean, s.top20.mean
            );
        }
        Cmd::Sweep { common, alphas } => {
            let cfg = common.load()?;
            let alphas = parse_alphas(&alphas)?;
            let res = cmd_sweep_alpha(&cfg, &alphas, &cfg.out_dir)?;
            println!("{:>8} {:>10} {:>10} {:>8} {:>12}", "alpha", "mean_rank", "rank_std", "recall", "consistency");
            for r in &res.rows {
                println!("{:>8} {:>10.2} {:>10.2} {:>8.3} {:>12.3e}", r.alpha, r.mean_rank, r.rank_std, r.recall, r.consistency_residual);
            }
        }
        Cmd::Verify(c) => {
            let cfg = c.load()?;
            let results = cmd_verify(&cfg, &cfg.out_dir)?;
            print!("{}", render_checks(&results));
            return Ok(results.iter().all(|r| r.ok()));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("editleak: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
