// SPDX-License-Identifier: MIT OR Apache-2.0

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use headsteer::steering::SiteSet;

use crate::config::{Overrides, RunConfig};
use crate::error::{CliError, CliResult};

/// Localize persona-carrying attention heads and compare steering sites.
#[derive(Parser, Debug)]
#[command(name = "headsteer", version, about)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Collect activations and write diff-in-means vectors.
    Extract(RunArgs),
    /// Similarity heatmaps, head contribution scores and head selection.
    Localize(RunArgs),
    /// Steering sweeps for every configured site set.
    Steer(RunArgs),
    /// Cumulative zero ablation of the selected heads.
    Ablate(RunArgs),
    /// Frontiers and envelope scores from the steering records.
    Pareto(RunArgs),
    /// Markdown summary of every artifact present.
    Report(RunArgs),
    /// Write the planted-head model, persona and a starter config.
    Fixture(FixtureArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Experiment config (JSON).
    #[arg(short, long)]
    config: PathBuf,
    #[arg(long)]
    outdir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    runs: Option<usize>,
    /// Response length for extraction and steering.
    #[arg(long)]
    max_new: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    /// Layer for head selection and layer-level site sets.
    #[arg(long)]
    layer: Option<usize>,
    /// Comma-separated coefficient grid.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    coefficients: Option<Vec<f64>>,
    /// Site set to steer (repeatable), e.g. `head_cor`, `mlp_residual`.
    #[arg(long = "site-set", value_parser = parse_site_set)]
    site_sets: Vec<SiteSet>,
}

#[derive(Args, Debug)]
struct FixtureArgs {
    /// Directory to write into.
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_site_set(s: &str) -> Result<SiteSet, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| {
        format!("unknown site set `{s}` (expected mlp_residual, attn_residual, attn_output, head_cor or head_cor_anti)")
    })
}

impl RunArgs {
    fn load(&self) -> CliResult<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        cfg.apply(&Overrides {
            outdir: self.outdir.clone(),
            seed: self.seed,
            runs: self.runs,
            max_new: self.max_new,
            tau: self.tau,
            layer: self.layer,
            coefficients: self.coefficients.clone(),
            site_sets: self.site_sets.clone(),
        });
        Ok(cfg)
    }
}

fn run(cli: Cli) -> CliResult<PathBuf> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(CliError::config("--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::config(format!("cannot start {n} workers: {e}")))?;
    }
    match cli.command {
        Command::Extract(a) => commands::extract(&a.load()?),
        Command::Localize(a) => commands::localize(&a.load()?),
        Command::Steer(a) => commands::steer(&a.load()?),
        Command::Ablate(a) => commands::ablate(&a.load()?),
        Command::Pareto(a) => commands::pareto(&a.load()?),
        Command::Report(a) => commands::report(&a.load()?),
        Command::Fixture(a) => commands::fixture(&a.out, a.seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(path) => {
            println!("{}", path.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
