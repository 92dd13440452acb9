//! `nudich`: batch front end. Loads a TOML config, runs one pipeline and writes
//! `report.json` plus CSV tables. Exit code 0 when every certificate passes,
//! 2 when one fails, 1 on any error.

mod config;
mod output;
mod pipelines;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde_json::json;

use config::RunConfig;
use pipelines::Outcome;

#[derive(Parser, Debug)]
#[command(name = "nudich", version, about = "Certify nonuniform dichotomies and their consequences")]
struct Cli {
    /// TOML run configuration; every key has a default.
    #[arg(long, global = true, env = "NUDICH_CONFIG")]
    config: Option<PathBuf>,
    /// Output directory for report.json and the CSV tables.
    #[arg(long, global = true, env = "NUDICH_OUT", default_value = "nudich-out")]
    out: PathBuf,
    /// Worker threads for internal parallelism.
    #[arg(long, global = true, env = "NUDICH_THREADS")]
    threads: Option<usize>,
    #[arg(long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Validate the configured growth rates.
    Rates,
    /// Compare the evolution operator with a reference on random pairs.
    Evolve,
    #[command(subcommand)]
    Dichotomy(DichotomyCmd),
    /// Exponents of a block system and the dichotomy they imply.
    Spectrum,
    /// Build the quadratic Lyapunov function and check its inequalities.
    Lyapunov,
    /// Perturbed projections and bounds under a linear perturbation.
    Robust,
    /// Linearizing conjugacy on a box of initial values.
    Conjugacy,
    /// Stable manifold graph and its certificate.
    Manifold,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum DichotomyCmd {
    /// Check the configured constants on a square grid.
    Verify,
    /// Fit constants on the grid and re-verify them.
    Estimate,
}

impl Command {
    fn label(self) -> &'static str {
        match self {
            Command::Rates => "rates",
            Command::Evolve => "evolve",
            Command::Dichotomy(DichotomyCmd::Verify) => "dichotomy verify",
            Command::Dichotomy(DichotomyCmd::Estimate) => "dichotomy estimate",
            Command::Spectrum => "spectrum",
            Command::Lyapunov => "lyapunov",
            Command::Robust => "robust",
            Command::Conjugacy => "conjugacy",
            Command::Manifold => "manifold",
        }
    }

    fn run(self, cfg: &mut RunConfig) -> anyhow::Result<Outcome> {
        match self {
            Command::Rates => pipelines::rates(cfg),
            Command::Evolve => pipelines::evolve(cfg),
            Command::Dichotomy(DichotomyCmd::Verify) => pipelines::dichotomy_verify(cfg),
            Command::Dichotomy(DichotomyCmd::Estimate) => pipelines::dichotomy_estimate(cfg),
            Command::Spectrum => pipelines::spectrum_cmd(cfg),
            Command::Lyapunov => pipelines::lyapunov(cfg),
            Command::Robust => pipelines::robust_cmd(cfg),
            Command::Conjugacy => pipelines::conjugacy_cmd(cfg),
            Command::Manifold => pipelines::manifold_cmd(cfg),
        }
    }
}

fn execute(cli: &Cli) -> anyhow::Result<bool> {
    let start = Instant::now();
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    let env: Vec<(String, String)> = std::env::vars().collect();
    let (mut cfg, overrides) = config::load(cli.config.as_deref(), &env)?;
    let problems = cfg.validate();
    if !problems.is_empty() {
        anyhow::bail!("invalid configuration:\n  {}", problems.join("\n  "));
    }
    if cli.verbose {
        eprintln!("nudich: running `{}`", cli.command.label());
    }
    let loaded = start.elapsed();
    let outcome = cli.command.run(&mut cfg)?;
    let computed = start.elapsed();
    std::fs::create_dir_all(&cli.out)?;
    for t in &outcome.tables {
        t.write(&cli.out)?;
    }
    let report = json!({
        "tool": "nudich",
        "version": env!("CARGO_PKG_VERSION"),
        "command": cli.command.label(),
        "config": cfg,
        "env_overrides": overrides,
        "result": outcome.result,
        "pass": outcome.pass,
        "outputs": outcome.tables.iter().map(|t| t.name).collect::<Vec<_>>(),
        "timings_ms": {
            "setup": loaded.as_secs_f64() * 1e3,
            "compute": (computed - loaded).as_secs_f64() * 1e3,
        },
    });
    output::write_report(&cli.out, &report)?;
    if cli.verbose {
        eprintln!("nudich: {} in {:.2} s", if outcome.pass { "pass" } else { "FAIL" }, start.elapsed().as_secs_f64());
    }
    Ok(outcome.pass)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("nudich: certificate failed; see {}", cli.out.join("report.json").display());
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("nudich: error: {e:#}");
            ExitCode::from(1)
        }
    }
}
