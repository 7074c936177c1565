use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use partial_gdro_cli::config::ExperimentConfig;
use partial_gdro_cli::report;
use partial_gdro_cli::runner::{self, RunOptions};
use partial_gdro_cli::CliError;

#[derive(Parser)]
#[command(name = "pgdro", about = "Worst-group robust training with partial group labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run only this seed, overriding `seeds`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory, overriding `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write train/val/test datasets for each seed.
    Gen(Common),
    /// Train the configured method on each seed.
    Run(Common),
    /// Numerical checks of the theory; exits 4 on a violation.
    Bounds {
        #[command(flatten)]
        common: Common,
        /// Comma-separated suites (`lemmas`, `scaling`); overrides `bounds.suite`.
        #[arg(long)]
        suite: Option<String>,
    },
    /// Flip or class-input ablation (`ablate.kind`).
    Ablate(Common),
    /// Aggregate `results.csv` of one or more run directories.
    Report {
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
        /// Where report files go; defaults to the first run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("reading {}: {e}", path.display())))?;
            ExperimentConfig::parse(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn options(common: &Common) -> RunOptions {
    RunOptions {
        workers: common.workers,
        ..RunOptions::default()
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen(common) => {
            let cfg = load(&common)?;
            for path in runner::cmd_gen(&cfg, &cfg.output_dir)? {
                println!("{}", path.display());
            }
        }
        Command::Run(common) => {
            let cfg = load(&common)?;
            for r in runner::cmd_run(&cfg, &options(&common))? {
                println!("{}", runner::results_row(&r));
            }
        }
        Command::Bounds { common, suite } => {
            let mut cfg = load(&common)?;
            if let Some(s) = suite {
                cfg.set("bounds.suite", &s)?;
            }
            let seed = cfg.seeds[0];
            let outcome = runner::cmd_bounds(&cfg, seed)?;
            for line in &outcome.lines {
                println!("{line}");
            }
            if outcome.violations > 0 {
                return Err(CliError::Violations(outcome.violations));
            }
        }
        Command::Ablate(common) => {
            let cfg = load(&common)?;
            runner::cmd_ablate(&cfg, &options(&common))?;
        }
        Command::Report { run_dirs, out } => {
            let rep = report::aggregate(&run_dirs)?;
            rep.write(out.as_ref().unwrap_or(&run_dirs[0]))?;
            print!("{}", rep.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
