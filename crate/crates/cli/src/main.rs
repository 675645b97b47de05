use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kwscale_cli::{commands, validate, CliError, ExperimentConfig};

#[derive(Parser)]
#[command(name = "kwscale", version, about = "Stationary cost oracle and Kiefer-Wolfowitz search for scale-per-request autoscaling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run this single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Exact stationary cost over the configured grid.
    OracleSweep,
    /// Episodic Kiefer-Wolfowitz runs, one CSV per seed and starting point.
    Kw,
    /// Fast-update baselines.
    Fast,
    /// Invariant suites at small capacity; JSON report.
    Validate,
}

fn load(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config is required".into()))?;
    let mut config = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        config.seeds = vec![seed];
    }
    if let Some(out) = &cli.out {
        config.out = out.clone();
    }
    Ok(config)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let config = load(cli)?;
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::OracleSweep => commands::cmd_oracle_sweep(&config, &mut out),
        Command::Kw => commands::cmd_kw(&config, &mut out),
        Command::Fast => commands::cmd_fast(&config, &mut out),
        Command::Validate => {
            let report = validate::run(&config);
            let json = report.to_json();
            fs::create_dir_all(&config.out)?;
            fs::write(config.out.join("validate.json"), format!("{json}\n"))?;
            writeln!(out, "{json}")?;
            if report.passed {
                Ok(())
            } else {
                Err(CliError::Failed("validation failed".into()))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("kwscale: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
