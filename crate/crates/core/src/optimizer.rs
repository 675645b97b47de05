//! Kiefer–Wolfowitz search over the reserve parameter.
//!
//! Episode `n` spends `2Kτ_n` simulation steps to estimate the cost slope at
//! `θ_n` and then moves `θ_{n+1} = θ_n - γ_n (f̂⁺ - f̂⁻) / (2δ_n)`. The
//! fast-update baseline keeps the same recursion but updates every
//! `update_every` steps instead of letting `τ_n` grow.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::cost::CostWeights;
use crate::error::{Error, Result};
use crate::model::{ModelParams, SystemState};
use crate::policy::{PolicyKind, SmoothingSpec};
use crate::simulator::{run_episode, EmpiricalMeasure, EpisodeContext, EpisodeRecord};

/// Upper end of the range over which schedule monotonicity is checked.
pub const SCHEDULE_CHECK_HORIZON: u64 = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TauRule {
    /// `τ_n = max(1, ⌊τ·ln(n + 1)⌋)`.
    Log { tau: f64 },
    /// `τ_n = steps` for every episode.
    Constant { steps: u64 },
}

/// Step size, perturbation width and episode lengths:
/// `γ_n = γ₀ n^{-a}`, `δ_n = δ₀ n^{-d}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedules {
    pub gamma0: f64,
    pub gamma_power: f64,
    pub delta0: f64,
    pub delta_power: f64,
    pub tau: TauRule,
    /// Segments per side of the difference.
    pub k: u32,
    /// Total simulation-step budget.
    pub budget: u64,
}

impl Default for Schedules {
    fn default() -> Self {
        Self {
            gamma0: 10.0,
            gamma_power: 1.0,
            delta0: 1.0,
            delta_power: 2.0 / 3.0,
            tau: TauRule::Log { tau: 1e6 },
            k: 2,
            budget: 100_000_000,
        }
    }
}

/// Which of the classical step-size conditions the schedules satisfy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ScheduleConditions {
    /// `Σ γ_n = ∞`.
    pub gamma_sum_diverges: bool,
    /// `Σ γ_n² / δ_n² < ∞`.
    pub noise_sum_converges: bool,
    pub tau_unbounded: bool,
}

impl Schedules {
    pub fn gamma(&self, n: u64) -> f64 {
        self.gamma0 * (n as f64).powf(-self.gamma_power)
    }

    pub fn delta(&self, n: u64) -> f64 {
        self.delta0 * (n as f64).powf(-self.delta_power)
    }

    pub fn tau(&self, n: u64) -> u64 {
        match self.tau {
            TauRule::Log { tau } => ((tau * ((n + 1) as f64).ln()).floor() as u64).max(1),
            TauRule::Constant { steps } => steps,
        }
    }

    /// Rejects schedules that are non-finite, non-positive, or whose
    /// `γ_n`, `δ_n` and `γ_n/δ_n` fail to decrease strictly over
    /// `n ∈ [1, SCHEDULE_CHECK_HORIZON]`.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSchedule(msg));
        let reals = [self.gamma0, self.gamma_power, self.delta0, self.delta_power];
        if reals.iter().any(|v| !v.is_finite()) {
            return bad(format!("schedule constants must be finite, got {reals:?}"));
        }
        if self.gamma0 <= 0.0 || self.delta0 <= 0.0 {
            return bad("gamma0 and delta0 must be positive".into());
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if self.budget == 0 {
            return bad("budget must be positive".into());
        }
        match self.tau {
            TauRule::Log { tau } if !(tau.is_finite() && tau > 0.0) => {
                return bad(format!("tau must be finite and positive, got {tau}"))
            }
            TauRule::Constant { steps: 0 } => return bad("constant tau must be positive".into()),
            _ => {}
        }
        let mut prev = (self.gamma(1), self.delta(1));
        for n in 2..=SCHEDULE_CHECK_HORIZON {
            let cur = (self.gamma(n), self.delta(n));
            let name = if cur.0 >= prev.0 {
                Some("gamma_n")
            } else if cur.1 >= prev.1 {
                Some("delta_n")
            } else if cur.0 / cur.1 >= prev.0 / prev.1 {
                Some("gamma_n / delta_n")
            } else {
                None
            };
            if let Some(name) = name {
                return bad(format!("{name} is not strictly decreasing at n = {n}"));
            }
            prev = cur;
        }
        Ok(())
    }

    pub fn conditions(&self) -> ScheduleConditions {
        ScheduleConditions {
            gamma_sum_diverges: self.gamma_power <= 1.0,
            noise_sum_converges: 2.0 * (self.gamma_power - self.delta_power) > 1.0,
            tau_unbounded: matches!(self.tau, TauRule::Log { .. }),
        }
    }
}

/// One parameter update, `θ - γ (f̂⁺ - f̂⁻) / (2δ)`.
pub fn kw_step(theta: f64, fhat_plus: f64, fhat_minus: f64, gamma: f64, delta: f64) -> f64 {
    theta - gamma * (fhat_plus - fhat_minus) / (2.0 * delta)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KwConfig {
    pub params: ModelParams,
    pub kind: PolicyKind,
    pub weights: CostWeights,
    pub penalty: Option<SmoothingSpec>,
    pub schedules: Schedules,
    pub theta0: f64,
    pub seed: u64,
}

impl KwConfig {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.weights.validate()?;
        self.schedules.validate()?;
        if let PolicyKind::BinomialSmoothed(spec) = &self.kind {
            spec.validate_for(self.params.capacity)?;
        }
        if let Some(spec) = &self.penalty {
            SmoothingSpec::new(spec.epsilon, spec.m)?;
        }
        if !self.theta0.is_finite() {
            return Err(Error::InvalidPolicy(format!("theta0 must be finite, got {}", self.theta0)));
        }
        Ok(())
    }

    fn context(&self) -> EpisodeContext {
        EpisodeContext {
            params: self.params,
            kind: self.kind,
            weights: self.weights,
            penalty: self.penalty,
            x_start: SystemState::EMPTY,
            seed: self.seed,
        }
    }
}

/// `θ` after episode `n`, with `t` the cumulative step count.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TrajectoryPoint {
    pub n: u64,
    pub t: u64,
    pub theta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub seed: u64,
    /// Starts with `(0, 0, θ₀)`.
    pub points: Vec<TrajectoryPoint>,
}

impl Trajectory {
    pub fn terminal(&self) -> f64 {
        self.points.last().expect("trajectory holds its start").theta
    }

    pub fn episodes(&self) -> u64 {
        self.points.last().map_or(0, |p| p.n)
    }

    /// Latest point with `n ≤ episode`.
    pub fn at_episode(&self, episode: u64) -> &TrajectoryPoint {
        let i = self.points.partition_point(|p| p.n <= episode);
        &self.points[i.saturating_sub(1)]
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "n,t,theta")?;
        for p in &self.points {
            writeln!(out, "{},{},{}", p.n, p.t, p.theta)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct KwRun {
    pub trajectory: Trajectory,
    pub episodes: Vec<EpisodeRecord>,
    pub visits: Option<EmpiricalMeasure>,
}

/// Runs episodes until the next one would exceed the step budget.
pub fn run_kw(config: &KwConfig) -> Result<KwRun> {
    run_kw_with(config, false)
}

/// As [`run_kw`], optionally tallying every visited state.
pub fn run_kw_with(config: &KwConfig, record_visits: bool) -> Result<KwRun> {
    config.validate()?;
    drive(config, &config.schedules, 1.0, record_visits)
}

fn drive(config: &KwConfig, s: &Schedules, gamma_scale: f64, record_visits: bool) -> Result<KwRun> {
    let ctx = config.context();
    let mut visits = record_visits.then(|| EmpiricalMeasure::new(config.params.capacity));
    let mut theta = config.theta0;
    let mut t = 0u64;
    let mut points = vec![TrajectoryPoint { n: 0, t, theta }];
    let mut episodes = Vec::new();
    for n in 1.. {
        let (gamma, delta, tau) = (gamma_scale * s.gamma(n), s.delta(n), s.tau(n));
        let cost = 2 * s.k as u64 * tau;
        if t + cost > s.budget {
            break;
        }
        let rec = run_episode(&ctx, n, theta, delta, tau, s.k, visits.as_mut());
        theta = kw_step(theta, rec.fhat_plus, rec.fhat_minus, gamma, delta);
        if !theta.is_finite() {
            return Err(Error::Diverged { episode: n, theta });
        }
        t += rec.steps_consumed;
        points.push(TrajectoryPoint { n, t, theta });
        episodes.push(rec);
    }
    Ok(KwRun {
        trajectory: Trajectory {
            seed: config.seed,
            points,
        },
        episodes,
        visits,
    })
}

/// Per-seed endpoint summary.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ReplicationSummary {
    pub seed: u64,
    pub theta_final: f64,
    pub abs_err: f64,
    /// `(θ_n - θ*)² n^{2/3}` at the final episode.
    pub msq_n_scaled: f64,
}

impl ReplicationSummary {
    pub fn new(trajectory: &Trajectory, theta_star: f64) -> Self {
        let theta = trajectory.terminal();
        let n = trajectory.episodes() as f64;
        Self {
            seed: trajectory.seed,
            theta_final: theta,
            abs_err: (theta - theta_star).abs(),
            msq_n_scaled: (theta - theta_star).powi(2) * n.powf(2.0 / 3.0),
        }
    }
}

pub fn write_replications_csv<W: Write>(rows: &[ReplicationSummary], mut out: W) -> io::Result<()> {
    writeln!(out, "seed,theta_final,abs_err,msq_n_scaled")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.seed, r.theta_final, r.abs_err, r.msq_n_scaled)?;
    }
    Ok(())
}

/// How the fast baseline scales `γ_n`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GammaScaling {
    /// Same `γ_n` as the episodic search.
    Unscaled,
    /// `γ_n · update_every / τ`, the step an episode of length `τ` would
    /// spread over the same simulation time.
    PerStep,
    /// `γ_n` times a fixed nonnegative factor.
    Factor(f64),
}

impl GammaScaling {
    pub fn factor(&self, update_every: u64, tau: TauRule) -> f64 {
        match (self, tau) {
            (Self::Unscaled, _) => 1.0,
            (Self::PerStep, TauRule::Log { tau }) => update_every as f64 / tau,
            (Self::PerStep, TauRule::Constant { steps }) => update_every as f64 / steps as f64,
            (Self::Factor(f), _) => *f,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FastRun {
    /// Reported `θ`, clamped to `[-N, 2N]`.
    pub trajectory: Trajectory,
    /// Unclamped iterates, aligned with `trajectory.points`.
    pub raw: Vec<f64>,
    /// Whether a reported value sat on either clamp bound.
    pub bound_hit: bool,
}

pub fn reporting_bounds(capacity: u32) -> (f64, f64) {
    (-(capacity as f64), 2.0 * capacity as f64)
}

/// The recursion of [`run_kw`] with `τ_n = update_every` for every episode
/// and `γ_n` scaled by `scaling`. The base schedules are validated as given.
pub fn run_fast_update(config: &KwConfig, update_every: u64, scaling: GammaScaling) -> Result<FastRun> {
    config.validate()?;
    if update_every == 0 {
        return Err(Error::InvalidSchedule("update_every must be positive".into()));
    }
    let factor = scaling.factor(update_every, config.schedules.tau);
    if !(factor.is_finite() && factor >= 0.0) {
        return Err(Error::InvalidSchedule(format!("gamma scale must be finite and >= 0, got {factor}")));
    }
    let schedules = Schedules {
        tau: TauRule::Constant { steps: update_every },
        ..config.schedules
    };
    let run = drive(config, &schedules, factor, false)?;
    let (lo, hi) = reporting_bounds(config.params.capacity);
    let raw: Vec<f64> = run.trajectory.points.iter().map(|p| p.theta).collect();
    let mut bound_hit = false;
    let points = run
        .trajectory
        .points
        .iter()
        .map(|p| {
            let theta = p.theta.clamp(lo, hi);
            bound_hit |= theta <= lo || theta >= hi;
            TrajectoryPoint { theta, ..*p }
        })
        .collect();
    Ok(FastRun {
        trajectory: Trajectory {
            seed: config.seed,
            points,
        },
        raw,
        bound_hit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(budget: u64) -> KwConfig {
        KwConfig {
            params: ModelParams::reference(0.05, 5),
            kind: PolicyKind::Simplified,
            weights: CostWeights::default(),
            penalty: Some(SmoothingSpec::new(0.5, 4.5).unwrap()),
            schedules: Schedules {
                tau: TauRule::Log { tau: 50.0 },
                budget,
                ..Schedules::default()
            },
            theta0: 1.0,
            seed: 1,
        }
    }

    #[test]
    fn schedule_values() {
        let s = Schedules::default();
        assert_eq!(s.gamma(1), 10.0);
        assert_eq!(s.gamma(4), 2.5);
        assert!((s.delta(8) - 0.25).abs() < 1e-12);
        assert_eq!(s.tau(1), 693_147);
        let t = Schedules {
            tau: TauRule::Log { tau: 0.1 },
            ..s
        };
        assert_eq!(t.tau(1), 1);
        assert_eq!(t.tau(1000), 1);
    }

    #[test]
    fn default_schedule_is_valid_but_not_square_summable() {
        let s = Schedules::default();
        assert_eq!(s.validate(), Ok(()));
        let c = s.conditions();
        assert!(c.gamma_sum_diverges && c.tau_unbounded);
        assert!(!c.noise_sum_converges);
    }

    #[test]
    fn increasing_schedules_rejected() {
        let s = Schedules {
            gamma_power: -0.1,
            ..Schedules::default()
        };
        assert!(matches!(s.validate(), Err(Error::InvalidSchedule(_))));
        let s = Schedules {
            gamma_power: 0.5,
            delta_power: 0.5,
            ..Schedules::default()
        };
        assert!(s.validate().unwrap_err().to_string().contains("gamma_n / delta_n"));
        let s = Schedules {
            delta_power: 0.0,
            ..Schedules::default()
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn kw_step_example() {
        assert_eq!(kw_step(5.0, 6.0, 5.0, 0.1, 0.5), 4.9);
        assert_eq!(kw_step(5.0, 5.0, 5.0, 0.1, 0.5), 5.0);
    }

    #[test]
    fn budget_is_respected_and_run_is_deterministic() {
        let c = config(200_000);
        let a = run_kw(&c).unwrap();
        let b = run_kw(&c).unwrap();
        assert_eq!(a.trajectory, b.trajectory);
        let last = a.trajectory.points.last().unwrap();
        assert!(last.t <= 200_000);
        let next = 2 * 2 * c.schedules.tau(last.n + 1);
        assert!(last.t + next > 200_000);
        assert_eq!(a.episodes.len() as u64, a.trajectory.episodes());
        let used: u64 = a.episodes.iter().map(|e| e.steps_consumed).sum();
        assert_eq!(used, last.t);
    }

    #[test]
    fn budget_below_first_episode_keeps_theta0() {
        let run = run_kw(&config(10)).unwrap();
        assert_eq!(run.trajectory.points.len(), 1);
        assert_eq!(run.trajectory.terminal(), 1.0);
    }

    #[test]
    fn visits_match_step_count() {
        let run = run_kw_with(&config(50_000), true).unwrap();
        let v = run.visits.unwrap();
        assert_eq!(v.total(), run.trajectory.points.last().unwrap().t);
    }

    #[test]
    fn zero_cost_without_penalty_never_moves() {
        let mut c = config(100_000);
        c.weights = CostWeights::zero();
        c.penalty = None;
        let run = run_kw(&c).unwrap();
        assert!(run.trajectory.points.iter().all(|p| p.theta == 1.0));
    }

    #[test]
    fn penalty_alone_pulls_into_flat_region() {
        let mut c = config(2_000_000);
        c.weights = CostWeights::zero();
        c.theta0 = -3.0;
        let run = run_kw(&c).unwrap();
        let end = run.trajectory.terminal();
        assert!((0.0..=4.5).contains(&end), "{end}");
    }

    #[test]
    fn trajectory_lookup_and_csv() {
        let tr = Trajectory {
            seed: 3,
            points: vec![
                TrajectoryPoint { n: 0, t: 0, theta: 1.0 },
                TrajectoryPoint { n: 1, t: 4, theta: 1.5 },
                TrajectoryPoint { n: 2, t: 12, theta: 2.0 },
            ],
        };
        assert_eq!(tr.at_episode(1).theta, 1.5);
        assert_eq!(tr.at_episode(9).theta, 2.0);
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "n,t,theta\n0,0,1\n1,4,1.5\n2,12,2\n");
        let s = ReplicationSummary::new(&tr, 1.0);
        assert_eq!(s.abs_err, 1.0);
        assert!((s.msq_n_scaled - 2f64.powf(2.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn fast_update_clamps_report_only() {
        let mut c = config(40_000);
        c.penalty = None;
        c.theta0 = 30.0;
        let run = run_fast_update(&c, 100, GammaScaling::Unscaled).unwrap();
        assert_eq!(run.raw[0], 30.0);
        assert_eq!(run.trajectory.points[0].theta, 10.0);
        assert!(run.bound_hit);
        assert_eq!(run.trajectory.points.len(), run.raw.len());
        assert!(run_fast_update(&c, 0, GammaScaling::Unscaled).is_err());
        assert!(run_fast_update(&c, 100, GammaScaling::Factor(-1.0)).is_err());
    }

    #[test]
    fn zero_gamma_scale_freezes_theta() {
        let run = run_fast_update(&config(40_000), 100, GammaScaling::Factor(0.0)).unwrap();
        assert!(run.raw.iter().all(|&t| t == 1.0));
        assert!(!run.bound_hit);
    }

    #[test]
    fn per_step_factor() {
        assert_eq!(GammaScaling::PerStep.factor(100, TauRule::Log { tau: 1e6 }), 1e-4);
        assert_eq!(GammaScaling::PerStep.factor(100, TauRule::Constant { steps: 400 }), 0.25);
        assert_eq!(GammaScaling::Unscaled.factor(100, TauRule::Log { tau: 1e6 }), 1.0);
    }

    #[test]
    fn fast_update_uses_constant_episodes() {
        let c = config(40_000);
        let run = run_fast_update(&c, 100, GammaScaling::PerStep).unwrap();
        let last = run.trajectory.points.last().unwrap();
        assert_eq!(last.t, last.n * 400);
        assert_eq!(last.n, 100);
    }
}
