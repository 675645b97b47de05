//! Exact long-run cost through the stationary distribution of the generator.
//!
//! The chain is irreducible on the class reachable from the empty platform,
//! so states outside that class are pruned before solving and reported with
//! zero mass. Three solvers are available: power iteration on a uniformized
//! kernel, Gauss-Seidel sweeps on the balance equations, and a dense LU
//! solve for small spaces. They share the same stopping rule,
//! `‖mQ‖∞ < tolerance`.

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::{instant_cost, CostWeights};
use crate::error::{Error, Result};
use crate::model::{build_generator, Generator, ModelParams, StateSpace, SystemState};
use crate::policy::{PolicyKind, PolicySpec};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverKind {
    /// Dense LU up to [`DENSE_LIMIT`] reachable states, Gauss-Seidel above.
    #[default]
    Auto,
    Power,
    GaussSeidel,
    Dense,
}

/// Largest reachable class handed to the dense solver by [`SolverKind::Auto`].
pub const DENSE_LIMIT: usize = 1500;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverOptions {
    pub kind: SolverKind,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            kind: SolverKind::Auto,
            tolerance: 1e-10,
            max_iterations: 1_000_000,
        }
    }
}

impl SolverOptions {
    pub fn with_kind(kind: SolverKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StationarySolution {
    /// Probability vector over the full state space.
    pub m: Vec<f64>,
    /// `‖mQ‖∞`.
    pub residual: f64,
    pub iterations: usize,
    /// Size of the reachable class actually solved.
    pub reachable: usize,
}

impl StationarySolution {
    pub fn expectation(&self, space: &StateSpace, f: impl Fn(&SystemState) -> f64) -> f64 {
        self.m
            .iter()
            .zip(space.states())
            .filter(|(p, _)| **p != 0.0)
            .map(|(p, x)| p * f(x))
            .sum()
    }
}

/// Solves `mQ = 0, Σm = 1` on the class reachable from state index `start`.
/// `guess`, if given, is a full-space starting vector for the iterative
/// solvers.
pub fn solve_stationary(
    q: &Generator,
    start: usize,
    options: &SolverOptions,
    guess: Option<&[f64]>,
) -> Result<StationarySolution> {
    let keep = q.reachable_from(start);
    let sub = q.restrict(&keep);
    let init: Option<Vec<f64>> = guess.map(|g| keep.iter().map(|&i| g[i]).collect());
    let kind = match options.kind {
        SolverKind::Auto if sub.dim() <= DENSE_LIMIT => SolverKind::Dense,
        SolverKind::Auto => SolverKind::GaussSeidel,
        k => k,
    };
    let (m_sub, iterations) = match kind {
        SolverKind::Dense => (dense_solve(&sub), 1),
        SolverKind::Power => power_iteration(&sub, options, init)?,
        SolverKind::GaussSeidel | SolverKind::Auto => gauss_seidel(&sub, options, init)?,
    };
    let residual = residual(&sub, &m_sub);
    if !(residual < options.tolerance) {
        return Err(Error::SolverFailure {
            residual,
            iterations,
        });
    }
    let mut m = vec![0.0; q.dim()];
    for (&i, &p) in keep.iter().zip(&m_sub) {
        m[i] = p;
    }
    Ok(StationarySolution {
        m,
        residual,
        iterations,
        reachable: keep.len(),
    })
}

pub fn residual(q: &Generator, m: &[f64]) -> f64 {
    q.left_mul(m).iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

fn normalize(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
}

fn start_vector(dim: usize, init: Option<Vec<f64>>) -> Vec<f64> {
    match init {
        Some(mut v) if v.iter().all(|x| x.is_finite() && *x >= 0.0) && v.iter().sum::<f64>() > 0.0 => {
            // Keep every state reachable in the iterate.
            let floor = 1e-300;
            v.iter_mut().for_each(|x| *x = x.max(floor));
            normalize(&mut v);
            v
        }
        _ => vec![1.0 / dim as f64; dim],
    }
}

// Residual checks cost a full mat-vec; amortize them over a few sweeps.
const CHECK_EVERY: usize = 8;

fn power_iteration(
    q: &Generator,
    options: &SolverOptions,
    init: Option<Vec<f64>>,
) -> Result<(Vec<f64>, usize)> {
    let dim = q.dim();
    let mut m = start_vector(dim, init);
    if dim == 1 {
        return Ok((m, 0));
    }
    // Slightly above the largest outflow so every state keeps a self-loop.
    let rate = q.max_outflow() * 1.001;
    let mut next = vec![0.0; dim];
    for it in 1..=options.max_iterations {
        for (j, n) in next.iter_mut().enumerate() {
            *n = m[j] * (1.0 + q.diag(j) / rate);
        }
        for (i, &mi) in m.iter().enumerate() {
            if mi != 0.0 {
                let w = mi / rate;
                for (j, r) in q.row(i) {
                    next[j] += w * r;
                }
            }
        }
        std::mem::swap(&mut m, &mut next);
        if it % CHECK_EVERY == 0 {
            normalize(&mut m);
            if residual(q, &m) < options.tolerance {
                return Ok((m, it));
            }
        }
    }
    normalize(&mut m);
    let r = residual(q, &m);
    if r < options.tolerance {
        return Ok((m, options.max_iterations));
    }
    Err(Error::SolverFailure {
        residual: r,
        iterations: options.max_iterations,
    })
}

fn gauss_seidel(
    q: &Generator,
    options: &SolverOptions,
    init: Option<Vec<f64>>,
) -> Result<(Vec<f64>, usize)> {
    let dim = q.dim();
    let mut m = start_vector(dim, init);
    if dim == 1 {
        return Ok((m, 0));
    }
    let incoming = q.transpose();
    for it in 1..=options.max_iterations {
        // Alternate sweep direction (symmetric Gauss-Seidel).
        let sweep = |j: usize, m: &mut Vec<f64>| {
            let inflow: f64 = incoming.row(j).map(|(i, r)| m[i] * r).sum();
            m[j] = inflow / -incoming.diag(j);
        };
        if it % 2 == 1 {
            (0..dim).for_each(|j| sweep(j, &mut m));
        } else {
            (0..dim).rev().for_each(|j| sweep(j, &mut m));
        }
        normalize(&mut m);
        if it % CHECK_EVERY == 0 && residual(q, &m) < options.tolerance {
            return Ok((m, it));
        }
    }
    let r = residual(q, &m);
    if r < options.tolerance {
        return Ok((m, options.max_iterations));
    }
    Err(Error::SolverFailure {
        residual: r,
        iterations: options.max_iterations,
    })
}

/// Dense LU on `Qᵀ m = 0` with the last equation replaced by `Σm = 1`.
fn dense_solve(q: &Generator) -> Vec<f64> {
    let dim = q.dim();
    if dim == 1 {
        return vec![1.0];
    }
    let mut a = DMatrix::<f64>::zeros(dim, dim);
    for i in 0..dim {
        a[(i, i)] = q.diag(i);
        for (j, r) in q.row(i) {
            a[(j, i)] += r;
        }
    }
    for j in 0..dim {
        a[(dim - 1, j)] = 1.0;
    }
    let mut b = DVector::<f64>::zeros(dim);
    b[dim - 1] = 1.0;
    let x = a.lu().solve(&b).expect("balance equations of an irreducible chain are regular");
    let mut m: Vec<f64> = x.iter().map(|v| v.max(0.0)).collect();
    normalize(&mut m);
    m
}

/// One evaluation of the stationary cost.
#[derive(Clone, Debug, PartialEq)]
pub struct OraclePoint {
    pub theta: f64,
    pub cost: f64,
    pub residual: f64,
    pub states: usize,
    pub iterations: usize,
}

/// Sweep entry; failed points keep their error and the sweep moves on.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub theta: f64,
    pub outcome: Result<OraclePoint>,
}

/// Ground-truth evaluator of `c(θ) = Σ C(x) m_θ(x)` for one model, cost and
/// scale-up rule. The reported cost never includes the penalty.
#[derive(Clone, Debug)]
pub struct Oracle {
    params: ModelParams,
    weights: CostWeights,
    kind: PolicyKind,
    space: StateSpace,
    options: SolverOptions,
    empty: usize,
}

impl Oracle {
    pub fn new(params: ModelParams, weights: CostWeights, kind: PolicyKind) -> Result<Self> {
        params.validate()?;
        weights.validate()?;
        PolicySpec { kind, theta: 0.0 }.validate_for(params.capacity)?;
        let space = StateSpace::enumerate(params.capacity);
        let empty = space.index_of(&SystemState::EMPTY).expect("empty state");
        Ok(Self {
            params,
            weights,
            kind,
            space,
            options: SolverOptions::default(),
            empty,
        })
    }

    pub fn with_options(mut self, options: SolverOptions) -> Self {
        self.options = options;
        self
    }

    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn weights(&self) -> &CostWeights {
        &self.weights
    }

    pub fn generator(&self, theta: f64) -> Generator {
        build_generator(&PolicySpec { kind: self.kind, theta }, &self.params, &self.space)
    }

    pub fn solve(&self, theta: f64, guess: Option<&[f64]>) -> Result<StationarySolution> {
        let q = self.generator(theta);
        solve_stationary(&q, self.empty, &self.options, guess)
    }

    pub fn cost_of(&self, solution: &StationarySolution) -> f64 {
        let n = self.params.capacity;
        solution.expectation(&self.space, |x| instant_cost(x, &self.weights, n))
    }

    pub fn evaluate(&self, theta: f64) -> Result<OraclePoint> {
        self.evaluate_from(theta, None).map(|(p, _)| p)
    }

    fn evaluate_from(
        &self,
        theta: f64,
        guess: Option<&[f64]>,
    ) -> Result<(OraclePoint, StationarySolution)> {
        let sol = self.solve(theta, guess)?;
        let point = OraclePoint {
            theta,
            cost: self.cost_of(&sol),
            residual: sol.residual,
            states: sol.reachable,
            iterations: sol.iterations,
        };
        Ok((point, sol))
    }

    pub fn expected_cost(&self, theta: f64) -> Result<f64> {
        Ok(self.evaluate(theta)?.cost)
    }

    /// Evaluates every grid point independently (in parallel).
    pub fn sweep(&self, grid: &[f64]) -> Result<Vec<SweepPoint>> {
        if grid.is_empty() {
            return Err(Error::EmptyGrid);
        }
        Ok(grid
            .par_iter()
            .map(|&theta| SweepPoint {
                theta,
                outcome: self.evaluate(theta),
            })
            .collect())
    }

    pub fn fd_derivative(&self, theta: f64, h: f64) -> Result<f64> {
        central_difference(|t| self.expected_cost(t), theta, h)
    }

    /// Golden-section minimum of `c` on `[lo, hi]` to `1e-3` in `θ`, with
    /// warm-started solves.
    pub fn locate_minimum(&self, lo: f64, hi: f64) -> Result<(f64, f64)> {
        let mut last: Option<Vec<f64>> = None;
        golden_section(
            |t| {
                let (p, sol) = self.evaluate_from(t, last.as_deref())?;
                last = Some(sol.m);
                Ok(p.cost)
            },
            lo,
            hi,
            THETA_TOLERANCE,
        )
    }
}

pub const THETA_TOLERANCE: f64 = 1e-3;

/// `(f(θ+h) - f(θ-h)) / 2h`.
pub fn central_difference(
    mut f: impl FnMut(f64) -> Result<f64>,
    theta: f64,
    h: f64,
) -> Result<f64> {
    assert!(h > 0.0, "step must be positive");
    Ok((f(theta + h)? - f(theta - h)?) / (2.0 * h))
}

/// Golden-section search for the minimum of `f` on `[lo, hi]`.
///
/// A coarse 9-point scan runs first; an interior local maximum on it means
/// the bracket is not unimodal and the offending triple is returned.
pub fn golden_section(
    mut f: impl FnMut(f64) -> Result<f64>,
    lo: f64,
    hi: f64,
    tol: f64,
) -> Result<(f64, f64)> {
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidBracket { lo, hi });
    }
    const SCAN: usize = 9;
    let mut scan = Vec::with_capacity(SCAN);
    for i in 0..SCAN {
        let t = lo + (hi - lo) * i as f64 / (SCAN - 1) as f64;
        scan.push((t, f(t)?));
    }
    for w in scan.windows(3) {
        let slack = 1e-12 * w[1].1.abs().max(1.0);
        if w[1].1 > w[0].1 + slack && w[1].1 > w[2].1 + slack {
            return Err(Error::NotUnimodal {
                triple: [w[0], w[1], w[2]],
            });
        }
    }
    // Shrink to the scan cell pair around the best scan point.
    let best = scan
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
        .map(|(i, _)| i)
        .unwrap();
    let mut a = scan[best.saturating_sub(1)].0;
    let mut b = scan[(best + 1).min(SCAN - 1)].0;

    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c)?;
    let mut fd = f(d)?;
    while b - a > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d)?;
        }
    }
    let (mut t, mut v) = if fc <= fd { (c, fc) } else { (d, fd) };
    // The minimum may sit on the bracket edge.
    for &(st, sv) in &scan {
        if sv < v {
            t = st;
            v = sv;
        }
    }
    Ok((t, v))
}

/// Writes `theta,cost,residual,states,iterations`; failed points leave the
/// numeric columns empty.
pub fn write_sweep_csv<W: Write>(out: &mut W, points: &[SweepPoint]) -> io::Result<()> {
    writeln!(out, "theta,cost,residual,states,iterations")?;
    for p in points {
        match &p.outcome {
            Ok(o) => writeln!(
                out,
                "{},{},{:e},{},{}",
                p.theta, o.cost, o.residual, o.states, o.iterations
            )?,
            Err(_) => writeln!(out, "{},,,,", p.theta)?,
        }
    }
    Ok(())
}
