//! Invariant suites over small capacities, reported as JSON.

use kwscale::model::{dtmc_row, uniformization_rate};
use kwscale::simulator::cost_batch_means;
use kwscale::{
    build_generator, penalty, smooth_param, smooth_step, ModelParams, Oracle, PolicyKind,
    PolicySpec, RngStream, SmoothingSpec, StateSpace,
};
use serde::Serialize;

use crate::config::ExperimentConfig;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub measured: f64,
    pub threshold: f64,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Report {
    pub passed: bool,
    pub checks: Vec<Check>,
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn at_most(name: &'static str, measured: f64, threshold: f64, detail: String) -> Check {
    Check {
        name,
        passed: measured <= threshold,
        measured,
        threshold,
        detail,
    }
}

/// Policies exercised at capacity `n`: the simplified rule over a few
/// reserves, plus the smoothed rule when its defaults are admissible.
fn policies(n: u32) -> Vec<PolicySpec> {
    let mut out: Vec<PolicySpec> = [0.0, 0.5, 2.3, n as f64 - 0.5]
        .into_iter()
        .map(PolicySpec::simplified)
        .collect();
    if let Ok(spec) = SmoothingSpec::default_for(n) {
        if spec.validate_for(n).is_ok() {
            out.extend([0.7, 1.9].map(|t| PolicySpec::binomial(t, spec)));
        }
    }
    out
}

fn with_capacity(p: &ModelParams, n: u32) -> ModelParams {
    ModelParams { capacity: n, ..*p }
}

pub fn run(config: &ExperimentConfig) -> Report {
    let opts = &config.validate;
    let caps = 1..=opts.max_capacity;
    let mut checks = Vec::new();

    let mut size_errors = 0.0;
    for n in caps.clone() {
        let mut expected = 0usize;
        for a in 0..=n {
            for b in 0..=n - a {
                for c in 0..=n - a - b {
                    expected += c as usize + 1;
                }
            }
        }
        if StateSpace::enumerate(n).len() != expected {
            size_errors += 1.0;
        }
    }
    checks.push(at_most("state_space_size", size_errors, 0.0, "capacities with a wrong state count".into()));

    let (mut row_sum, mut outflow_excess, mut mass_err, mut escapes) = (0.0f64, f64::NEG_INFINITY, 0.0f64, 0.0);
    for n in caps.clone() {
        let params = with_capacity(&config.model, n);
        let space = StateSpace::enumerate(n);
        let rate = uniformization_rate(&params);
        for policy in policies(n) {
            let q = build_generator(&policy, &params, &space);
            for i in 0..q.dim() {
                row_sum = row_sum.max(q.row_sum(i).abs());
            }
            outflow_excess = outflow_excess.max(q.max_outflow() - rate);
            for x in space.states() {
                let row = dtmc_row(x, &policy, &params);
                let total: f64 = row.iter().map(|(_, p)| p).sum();
                mass_err = mass_err.max((total - 1.0).abs());
                escapes += row.iter().filter(|(y, _)| !y.is_valid(n)).count() as f64;
            }
        }
    }
    checks.push(at_most("generator_row_sums", row_sum, 1e-12, "max |row sum of Q| over the full space".into()));
    checks.push(at_most("uniformization_bound", outflow_excess, 0.0, "max outflow minus uniformization rate".into()));
    checks.push(at_most("dtmc_row_mass", mass_err, 1e-12, "max |row mass - 1| of the uniformized kernel".into()));
    checks.push(at_most("transitions_in_space", escapes, 0.0, "targets outside the state space".into()));

    let psi = smooth_step(0.0, 1.0, 0.5).map_or(f64::INFINITY, |v| (v - (-0.5f64).exp()).abs());
    checks.push(at_most("smooth_step_midpoint", psi, 1e-12, "|psi_{0,1}(0.5) - exp(-0.5)|".into()));

    let spec = match &config.policy {
        PolicyKind::BinomialSmoothed(s) => *s,
        PolicyKind::Simplified => config.penalty.unwrap_or(SmoothingSpec { epsilon: 0.5, m: 10.0 }),
    };
    let grid: Vec<f64> = (0..=1000)
        .map(|i| spec.epsilon + (spec.m - 2.0 * spec.epsilon) * i as f64 / 1000.0)
        .collect();
    let ident = grid.iter().map(|&t| (smooth_param(t, &spec) - t).abs()).fold(0.0, f64::max);
    checks.push(at_most("smooth_param_identity", ident, 0.0, format!("max |theta_eps,M - theta| on [{}, {}]", spec.epsilon, spec.m - spec.epsilon)));
    let pen = grid.iter().map(|&t| penalty(t, &spec)).fold(0.0, f64::max);
    checks.push(at_most("penalty_flat_region", pen, 0.0, "max penalty on the flat region".into()));

    let mut residual = 0.0f64;
    let mut failures = 0.0;
    for n in caps {
        let params = with_capacity(&config.model, n);
        for policy in policies(n) {
            match Oracle::new(params, config.weights, policy.kind).and_then(|o| o.evaluate(policy.theta)) {
                Ok(p) => residual = residual.max(p.residual),
                Err(_) => failures += 1.0,
            }
        }
    }
    checks.push(at_most("stationary_residual", residual, 1e-10, "max |mQ| over all solves".into()));
    checks.push(at_most("stationary_failures", failures, 0.0, "solver failures".into()));

    checks.push(simulation_check(config));

    Report {
        passed: checks.iter().all(|c| c.passed),
        checks,
    }
}

/// Batch-means average cost at capacity 5 against the oracle, in standard
/// errors.
fn simulation_check(config: &ExperimentConfig) -> Check {
    let opts = &config.validate;
    let params = with_capacity(&config.model, 5);
    let policy = match config.policy {
        PolicyKind::BinomialSmoothed(s) if s.validate_for(5).is_ok() => PolicySpec::binomial(opts.mc_theta, s),
        _ => PolicySpec::simplified(opts.mc_theta),
    };
    let oracle = match Oracle::new(params, config.weights, policy.kind).and_then(|o| o.expected_cost(policy.theta)) {
        Ok(c) => c,
        Err(e) => {
            return Check {
                name: "oracle_vs_simulation",
                passed: false,
                measured: f64::NAN,
                threshold: 3.0,
                detail: e.to_string(),
            }
        }
    };
    let seed = config.seeds[0];
    let mut rng = RngStream::auxiliary(seed, 0).rng();
    let batch = (opts.mc_steps / 100).max(1);
    let bm = cost_batch_means(&params, &policy, &config.weights, batch, opts.mc_steps, batch, &mut rng);
    let (measured, detail) = match bm.standard_error() {
        Some((mean, se)) if se > 0.0 => ((mean - oracle).abs() / se, format!("simulated {mean:.6} ± {se:.6}, oracle {oracle:.6}")),
        Some((mean, _)) => (if mean == oracle { 0.0 } else { f64::INFINITY }, format!("simulated {mean:.6} with zero spread, oracle {oracle:.6}")),
        None => (f64::INFINITY, "too few batches".into()),
    };
    at_most("oracle_vs_simulation", measured, 3.0, detail)
}
