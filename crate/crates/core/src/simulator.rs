//! Seeded simulation of the uniformized chain.
//!
//! Every step draws one event out of `Λ = λ + N(μ + β + γ)`; the leftover
//! mass is a self-loop. Arrivals that trigger a scale-up draw the number of
//! init0 servers from the policy. One optimizer episode runs `K` segments at
//! `θ + δ` followed by `K` at `θ - δ`, each restarted from the same start
//! state and each on its own random stream.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cost::{instant_cost, CostWeights};
use crate::model::{
    after_arrival, after_expiration, after_init, after_service, arrival_kind, uniformization_rate,
    ArrivalKind, ModelParams, StateSpace, SystemState,
};
use crate::policy::{penalty, CompiledPolicy, PolicyKind, PolicySpec, SmoothingSpec};
use crate::stats::BatchMeans;

/// Identifies one reproducible random stream: a ChaCha8 generator keyed by
/// `seed` with stream number `stream`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
}

/// Streams with the top bit set are reserved for uses outside episodes.
const AUX_STREAM: u64 = 1 << 63;

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    /// Stream of segment `segment` in episode `episode`:
    /// `episode << 24 | segment`.
    pub fn segment(seed: u64, episode: u64, segment: u32) -> Self {
        debug_assert!(segment < 1 << 24 && episode < 1 << 39);
        Self::new(seed, episode << 24 | segment as u64)
    }

    /// Auxiliary stream `index`, disjoint from every segment stream.
    pub fn auxiliary(seed: u64, index: u64) -> Self {
        Self::new(seed, AUX_STREAM | index)
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

/// One-step sampler of the uniformized chain under a fixed policy.
#[derive(Clone, Debug)]
pub struct Simulator {
    params: ModelParams,
    rate: f64,
    policy: CompiledPolicy,
}

impl Simulator {
    pub fn new(params: &ModelParams, policy: &PolicySpec) -> Self {
        Self {
            params: *params,
            rate: uniformization_rate(params),
            policy: policy.compile(params.capacity),
        }
    }

    pub fn uniformization_rate(&self) -> f64 {
        self.rate
    }

    pub fn step<R: Rng + ?Sized>(&self, x: &SystemState, rng: &mut R) -> SystemState {
        let p = &self.params;
        let mut u = rng.random::<f64>() * self.rate;
        if u < p.lambda {
            let kind = arrival_kind(x, p.capacity);
            let extra = match kind {
                ArrivalKind::ScaleUp => self.policy.sample(x, rng),
                _ => 0,
            };
            return after_arrival(x, kind, extra);
        }
        u -= p.lambda;
        let service = p.mu * x.busy as f64;
        if u < service {
            return after_service(x, p.handoff);
        }
        u -= service;
        let expiry = p.gamma_exp * x.idle as f64;
        if u < expiry {
            return after_expiration(x);
        }
        u -= expiry;
        if u < p.beta * x.init as f64 {
            return after_init(x);
        }
        *x
    }

    /// Runs `steps` transitions from `x`, calling `observe` on every state
    /// entered (self-loops included), and returns the terminal state.
    pub fn run<R: Rng + ?Sized>(
        &self,
        mut x: SystemState,
        steps: u64,
        rng: &mut R,
        mut observe: impl FnMut(&SystemState),
    ) -> SystemState {
        for _ in 0..steps {
            x = self.step(&x, rng);
            observe(&x);
        }
        x
    }
}

/// Visit tallies over the state space, accumulated across segments.
#[derive(Clone, Debug)]
pub struct EmpiricalMeasure {
    space: StateSpace,
    counts: Vec<u64>,
    total: u64,
}

impl EmpiricalMeasure {
    pub fn new(capacity: u32) -> Self {
        let space = StateSpace::enumerate(capacity);
        let counts = vec![0; space.len()];
        Self {
            space,
            counts,
            total: 0,
        }
    }

    pub fn record(&mut self, x: &SystemState) {
        let i = self.space.index_of(x).expect("visited state lies in the space");
        self.counts[i] += 1;
        self.total += 1;
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    /// Visit frequencies, aligned with [`StateSpace::states`].
    pub fn frequencies(&self) -> Vec<f64> {
        let total = self.total.max(1) as f64;
        self.counts.iter().map(|&c| c as f64 / total).collect()
    }
}

pub fn simulate_segment<R: Rng + ?Sized>(
    x_start: SystemState,
    policy: &PolicySpec,
    params: &ModelParams,
    steps: u64,
    rng: &mut R,
    visits: Option<&mut EmpiricalMeasure>,
) -> SystemState {
    let sim = Simulator::new(params, policy);
    match visits {
        Some(v) => sim.run(x_start, steps, rng, |x| v.record(x)),
        None => sim.run(x_start, steps, rng, |_| ()),
    }
}

/// Batch means of `C` along one trajectory from the empty state: `warmup`
/// steps are discarded, then `steps` are recorded in batches of `batch`.
pub fn cost_batch_means<R: Rng + ?Sized>(
    params: &ModelParams,
    policy: &PolicySpec,
    weights: &CostWeights,
    warmup: u64,
    steps: u64,
    batch: u64,
    rng: &mut R,
) -> BatchMeans {
    let sim = Simulator::new(params, policy);
    let n = params.capacity;
    let x = sim.run(SystemState::EMPTY, warmup, rng, |_| ());
    let mut bm = BatchMeans::new(batch);
    sim.run(x, steps, rng, |x| bm.push(instant_cost(x, weights, n)));
    bm
}

/// Everything an episode needs besides its index and parameters.
#[derive(Clone, Copy, Debug)]
pub struct EpisodeContext {
    pub params: ModelParams,
    pub kind: PolicyKind,
    pub weights: CostWeights,
    /// Penalty added to every observed cost, if any.
    pub penalty: Option<SmoothingSpec>,
    pub x_start: SystemState,
    pub seed: u64,
}

impl EpisodeContext {
    /// `F(θ, x)`: instant cost plus the penalty when one is configured.
    pub fn observed_cost(&self, theta: f64, x: &SystemState) -> f64 {
        let c = instant_cost(x, &self.weights, self.params.capacity);
        match &self.penalty {
            Some(spec) => c + penalty(theta, spec),
            None => c,
        }
    }
}

/// Outcome of one episode; serializes to the per-episode trace line.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpisodeRecord {
    pub n: u64,
    #[serde(rename = "theta")]
    pub theta_n: f64,
    #[serde(rename = "delta")]
    pub delta_n: f64,
    #[serde(rename = "tau")]
    pub tau_n: u64,
    pub fhat_plus: f64,
    pub fhat_minus: f64,
    #[serde(rename = "steps")]
    pub steps_consumed: u64,
}

/// Runs `k` segments of `tau` steps at `θ + δ`, then `k` at `θ - δ`, all from
/// `ctx.x_start`, and averages the observed terminal costs. Segment `i` of
/// the `+` batch uses stream `i`, segment `i` of the `-` batch stream `k + i`.
pub fn run_episode(
    ctx: &EpisodeContext,
    n: u64,
    theta: f64,
    delta: f64,
    tau: u64,
    k: u32,
    mut visits: Option<&mut EmpiricalMeasure>,
) -> EpisodeRecord {
    let batch = |probe: f64, offset: u32, visits: &mut Option<&mut EmpiricalMeasure>| {
        let policy = PolicySpec {
            kind: ctx.kind,
            theta: probe,
        };
        let sim = Simulator::new(&ctx.params, &policy);
        let mut sum = 0.0;
        for i in 0..k {
            let mut rng = RngStream::segment(ctx.seed, n, offset + i).rng();
            let end = match visits.as_deref_mut() {
                Some(v) => sim.run(ctx.x_start, tau, &mut rng, |x| v.record(x)),
                None => sim.run(ctx.x_start, tau, &mut rng, |_| ()),
            };
            sum += ctx.observed_cost(probe, &end);
        }
        sum / k as f64
    };
    let fhat_plus = batch(theta + delta, 0, &mut visits);
    let fhat_minus = batch(theta - delta, k, &mut visits);
    EpisodeRecord {
        n,
        theta_n: theta,
        delta_n: delta,
        tau_n: tau,
        fhat_plus,
        fhat_minus,
        steps_consumed: 2 * k as u64 * tau,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx(params: ModelParams, weights: CostWeights) -> EpisodeContext {
        EpisodeContext {
            params,
            kind: PolicyKind::Simplified,
            weights,
            penalty: None,
            x_start: SystemState::EMPTY,
            seed: 7,
        }
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let draw = |s: RngStream| -> Vec<u64> {
            let mut r = s.rng();
            (0..8).map(|_| r.random()).collect()
        };
        assert_eq!(draw(RngStream::new(1, 2)), draw(RngStream::new(1, 2)));
        assert_ne!(draw(RngStream::new(1, 2)), draw(RngStream::new(1, 3)));
        assert_ne!(draw(RngStream::new(1, 2)), draw(RngStream::new(2, 2)));
        assert_ne!(RngStream::segment(1, 0, 0), RngStream::auxiliary(1, 0));
    }

    #[test]
    fn same_seed_same_segment() {
        let params = ModelParams::reference(0.3, 10);
        let policy = PolicySpec::simplified(2.5);
        let mut a = EmpiricalMeasure::new(10);
        let mut b = EmpiricalMeasure::new(10);
        let end_a = simulate_segment(SystemState::EMPTY, &policy, &params, 50_000, &mut RngStream::new(9, 0).rng(), Some(&mut a));
        let end_b = simulate_segment(SystemState::EMPTY, &policy, &params, 50_000, &mut RngStream::new(9, 0).rng(), Some(&mut b));
        assert_eq!(end_a, end_b);
        assert_eq!(a.counts(), b.counts());
        assert_eq!(a.total(), 50_000);
    }

    #[test]
    fn zero_reserve_keeps_no_spawned_unbound_servers() {
        // Under θ = 0 an arrival never spawns init0 servers, so any unbound
        // initializing server must come from a service hand-off.
        let params = ModelParams::reference(0.3, 50);
        let sim = Simulator::new(&params, &PolicySpec::simplified(0.0));
        let mut rng = RngStream::new(3, 0).rng();
        let mut x = SystemState::EMPTY;
        for _ in 0..200_000 {
            let next = sim.step(&x, &mut rng);
            if next.init > x.init {
                assert_eq!(next.init - x.init, 1);
                assert_eq!(next.blocked, x.blocked + 1);
            }
            x = next;
        }
    }

    #[test]
    fn empty_state_survives_short_horizons() {
        // P(no arrival in s steps) = (1 - λ/Λ)^s from the empty state.
        let params = ModelParams::reference(0.3, 50);
        let policy = PolicySpec::simplified(1.0);
        let steps = 20;
        let reps = 20_000;
        let mut empty = 0;
        for r in 0..reps {
            let mut rng = RngStream::new(5, r).rng();
            if simulate_segment(SystemState::EMPTY, &policy, &params, steps, &mut rng, None) == SystemState::EMPTY {
                empty += 1;
            }
        }
        let p = (1.0 - 0.3 / 55.8f64).powi(steps as i32);
        let freq = empty as f64 / reps as f64;
        let se = (p * (1.0 - p) / reps as f64).sqrt();
        assert!((freq - p).abs() < 4.0 * se, "{freq} vs {p}");
        assert!((p - (-0.3 * steps as f64 / 55.8).exp()).abs() < 1e-3);
    }

    #[test]
    fn path_average_matches_oracle_small() {
        use crate::stationary::Oracle;
        let params = ModelParams::reference(0.3, 3);
        let policy = PolicySpec::simplified(1.5);
        let oracle = Oracle::new(params, CostWeights::default(), policy.kind).unwrap();
        let c = oracle.expected_cost(1.5).unwrap();
        let mut rng = RngStream::auxiliary(4, 0).rng();
        let bm = cost_batch_means(&params, &policy, &CostWeights::default(), 10_000, 2_000_000, 20_000, &mut rng);
        let (mean, se) = bm.standard_error().unwrap();
        assert_eq!(bm.means().len(), 100);
        assert!((mean - c).abs() < 4.0 * se, "{mean} ± {se} vs {c}");
    }

    #[test]
    fn episode_accounting() {
        let c = ctx(ModelParams::reference(0.3, 50), CostWeights::default());
        let rec = run_episode(&c, 3, 4.0, 0.5, 100, 2, None);
        assert_eq!(rec.steps_consumed, 4 * 100);
        assert!(rec.fhat_plus.is_finite() && rec.fhat_minus.is_finite());
        assert_eq!(rec, run_episode(&c, 3, 4.0, 0.5, 100, 2, None));
    }

    #[test]
    fn single_step_episode_observes_successor() {
        let params = ModelParams::reference(0.3, 50);
        let c = ctx(params, CostWeights::default());
        let rec = run_episode(&c, 1, 30.0, 0.5, 1, 1, None);
        // Replay segment 0 by hand.
        let sim = Simulator::new(&params, &PolicySpec::simplified(30.5));
        let x = sim.step(&SystemState::EMPTY, &mut RngStream::segment(7, 1, 0).rng());
        assert_eq!(rec.fhat_plus, instant_cost(&x, &CostWeights::default(), 50));
    }

    #[test]
    fn zero_weights_observe_zero() {
        let c = ctx(ModelParams::reference(0.3, 5), CostWeights::zero());
        let rec = run_episode(&c, 1, 2.0, 0.3, 1000, 2, None);
        assert_eq!((rec.fhat_plus, rec.fhat_minus), (0.0, 0.0));
    }

    #[test]
    fn observed_cost_includes_penalty() {
        let mut c = ctx(ModelParams::reference(0.3, 5), CostWeights::default());
        c.penalty = Some(SmoothingSpec::new(0.5, 4.0).unwrap());
        assert!((c.observed_cost(-2.0, &SystemState::EMPTY) - 6.25).abs() < 1e-12);
        assert_eq!(c.observed_cost(2.0, &SystemState::EMPTY), 0.0);
    }

    #[test]
    fn trace_line_keys() {
        let rec = EpisodeRecord {
            n: 1,
            theta_n: 2.0,
            delta_n: 1.0,
            tau_n: 10,
            fhat_plus: 3.0,
            fhat_minus: 4.0,
            steps_consumed: 40,
        };
        let json = serde_json::to_string(&rec).unwrap();
        assert_eq!(
            json,
            r#"{"n":1,"theta":2.0,"delta":1.0,"tau":10,"fhat_plus":3.0,"fhat_minus":4.0,"steps":40}"#
        );
    }
}
