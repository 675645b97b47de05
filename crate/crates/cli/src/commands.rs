//! The `oracle-sweep`, `kw` and `fast` subcommands.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use kwscale::optimizer::{write_replications_csv, GammaScaling, ReplicationSummary};
use kwscale::stationary::{golden_section, write_sweep_csv, SweepPoint, THETA_TOLERANCE};
use kwscale::{run_fast_update, run_kw, FastRun, KwRun, Oracle};
use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::CliError;

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, CliError> {
    fs::create_dir_all(dir)?;
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

#[derive(Clone, Debug)]
pub struct SweepSummary {
    pub points: Vec<SweepPoint>,
    pub theta_star: f64,
    pub cost_star: f64,
    pub cost_zero: f64,
    pub failed: usize,
}

impl SweepSummary {
    /// `(c(0) - c(θ*)) / c(0)`.
    pub fn gain(&self) -> f64 {
        (self.cost_zero - self.cost_star) / self.cost_zero
    }
}

/// Evaluates the grid, then refines the best grid point by golden-section
/// search between its neighbours.
pub fn oracle_sweep(config: &ExperimentConfig) -> Result<SweepSummary, CliError> {
    let oracle = Oracle::new(config.model, config.weights, config.policy)?
        .with_options(config.sweep.solver);
    let mut grid = config.grid();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let points = oracle.sweep(&grid)?;
    let ok: Vec<(usize, f64)> = points
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.outcome.as_ref().ok().map(|o| (i, o.cost)))
        .collect();
    let failed = points.len() - ok.len();
    let &(best, grid_cost) = ok
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .ok_or_else(|| CliError::Failed("every grid point failed".into()))?;
    let (mut theta_star, mut cost_star) = (grid[best], grid_cost);
    if config.sweep.refine && grid.len() > 1 {
        let lo = grid[best.saturating_sub(1)];
        let hi = grid[(best + 1).min(grid.len() - 1)];
        // Non-unimodal cells fall back to the grid minimum.
        if let Ok((t, c)) = golden_section(|t| Ok(oracle.evaluate(t)?.cost), lo, hi, THETA_TOLERANCE) {
            if c < cost_star {
                (theta_star, cost_star) = (t, c);
            }
        }
    }
    let cost_zero = match grid.iter().position(|&t| t == 0.0) {
        Some(i) => match &points[i].outcome {
            Ok(o) => o.cost,
            Err(e) => return Err(CliError::Failed(format!("c(0) failed: {e}"))),
        },
        None => oracle.expected_cost(0.0)?,
    };
    Ok(SweepSummary {
        points,
        theta_star,
        cost_star,
        cost_zero,
        failed,
    })
}

pub fn cmd_oracle_sweep(config: &ExperimentConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let s = oracle_sweep(config)?;
    let mut csv = create(&config.out, "sweep.csv")?;
    write_sweep_csv(&mut csv, &s.points)?;
    csv.flush()?;
    for p in &s.points {
        if let Err(e) = &p.outcome {
            writeln!(out, "theta={}: {e}", p.theta)?;
        }
    }
    writeln!(out, "theta_star={:.4}", s.theta_star)?;
    writeln!(out, "cost_star={:.6}", s.cost_star)?;
    writeln!(out, "cost_zero={:.6}", s.cost_zero)?;
    writeln!(out, "gain={:.4}", s.gain())?;
    if s.failed * 10 > s.points.len() {
        return Err(CliError::Failed(format!(
            "{} of {} grid points failed",
            s.failed,
            s.points.len()
        )));
    }
    Ok(())
}

fn tag(theta: f64) -> String {
    format!("{theta}").replace('-', "m")
}

pub fn kw_trajectory_path(dir: &Path, seed: u64, theta0: f64) -> PathBuf {
    dir.join(format!("kw_seed{seed}_theta0_{}.csv", tag(theta0)))
}

/// Runs every `(θ₀, seed)` pair; results come back in config order.
pub fn kw_runs(config: &ExperimentConfig) -> Result<Vec<(f64, KwRun)>, CliError> {
    let jobs: Vec<(f64, u64)> = config
        .kw
        .theta0
        .iter()
        .flat_map(|&t| config.seeds.iter().map(move |&s| (t, s)))
        .collect();
    jobs.par_iter()
        .map(|&(theta0, seed)| {
            let run = run_kw(&config.kw_config(seed, theta0))?;
            Ok((theta0, run))
        })
        .collect()
}

pub fn cmd_kw(config: &ExperimentConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let runs = kw_runs(config)?;
    fs::create_dir_all(&config.out)?;
    for (theta0, run) in &runs {
        let seed = run.trajectory.seed;
        let path = kw_trajectory_path(&config.out, seed, *theta0);
        let mut f = BufWriter::new(File::create(&path)?);
        run.trajectory.write_csv(&mut f)?;
        f.flush()?;
        if config.kw.trace {
            let mut f = BufWriter::new(File::create(path.with_extension("jsonl"))?);
            for e in &run.episodes {
                serde_json::to_writer(&mut f, e).map_err(std::io::Error::from)?;
                writeln!(f)?;
            }
            f.flush()?;
        }
        writeln!(
            out,
            "seed={seed} theta0={theta0} episodes={} steps={} theta_final={:.6}",
            run.trajectory.episodes(),
            run.trajectory.points.last().map_or(0, |p| p.t),
            run.trajectory.terminal()
        )?;
    }
    if let Some(theta_star) = config.kw.theta_star {
        for &theta0 in &config.kw.theta0 {
            let rows: Vec<ReplicationSummary> = runs
                .iter()
                .filter(|(t, _)| *t == theta0)
                .map(|(_, r)| ReplicationSummary::new(&r.trajectory, theta_star))
                .collect();
            let mut f = create(&config.out, &format!("kw_summary_theta0_{}.csv", tag(theta0)))?;
            write_replications_csv(&rows, &mut f)?;
            f.flush()?;
        }
    }
    Ok(())
}

pub fn scenario_label(s: &GammaScaling) -> String {
    match s {
        GammaScaling::Unscaled => "unscaled".into(),
        GammaScaling::PerStep => "per-step".into(),
        GammaScaling::Factor(f) => format!("factor{}", tag(*f)),
    }
}

pub struct FastResult {
    pub scenario: GammaScaling,
    pub update_every: u64,
    pub run: FastRun,
}

pub fn fast_runs(config: &ExperimentConfig) -> Result<Vec<FastResult>, CliError> {
    let mut jobs = Vec::new();
    for &scenario in &config.fast.scenarios {
        for &update_every in &config.fast.update_every {
            for &seed in &config.seeds {
                jobs.push((scenario, update_every, seed));
            }
        }
    }
    jobs.par_iter()
        .map(|&(scenario, update_every, seed)| {
            let run = run_fast_update(&config.kw_config(seed, config.fast.theta0), update_every, scenario)?;
            Ok(FastResult {
                scenario,
                update_every,
                run,
            })
        })
        .collect()
}

pub fn cmd_fast(config: &ExperimentConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let results = fast_runs(config)?;
    let mut summary = create(&config.out, "fast_summary.csv")?;
    writeln!(summary, "scenario,update_every,seed,theta_final,abs_err,bound_hit")?;
    for r in &results {
        let label = scenario_label(&r.scenario);
        let seed = r.run.trajectory.seed;
        let mut f = create(&config.out, &format!("fast_{label}_u{}_seed{seed}.csv", r.update_every))?;
        writeln!(f, "n,t,theta,raw_theta")?;
        for (p, raw) in r.run.trajectory.points.iter().zip(&r.run.raw) {
            writeln!(f, "{},{},{},{}", p.n, p.t, p.theta, raw)?;
        }
        f.flush()?;
        let theta = r.run.trajectory.terminal();
        let err = config
            .fast
            .theta_star
            .map_or(String::new(), |s| format!("{}", (theta - s).abs()));
        writeln!(summary, "{label},{},{seed},{theta},{err},{}", r.update_every, r.run.bound_hit)?;
        writeln!(
            out,
            "scenario={label} update_every={} seed={seed} theta_final={theta:.6} bound_hit={}",
            r.update_every, r.run.bound_hit
        )?;
    }
    summary.flush()?;
    Ok(())
}
