//! Scale-up rules mapping a real reserve `θ` to the number of extra (init0)
//! servers spawned when an arriving job finds no idle-on server.
//!
//! Two rules are provided. The simplified rule tops the unbound initializing
//! pool up to `θ`, randomizing between `⌊θ⌋` and `⌊θ⌋ + 1`. The smoothed rule
//! squashes `θ` into `(0, M)` with a `C^∞` map and draws a binomial count
//! with that mean. The quadratic penalty used to extend the cost outside
//! `[0, M]` lives here as well since it shares the smoothing parameters.

use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial as BinomialPmf, Discrete};

use crate::error::{Error, Result};
use crate::model::SystemState;

/// `C^∞` step going from 0 on `(-∞, a]` to 1 on `[b, ∞)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SmoothStep {
    a: f64,
    b: f64,
}

impl SmoothStep {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a < b) || !a.is_finite() || !b.is_finite() {
            return Err(Error::InvalidStep { a, b });
        }
        Ok(Self { a, b })
    }

    pub fn eval(&self, x: f64) -> f64 {
        if x <= self.a {
            0.0
        } else if x >= self.b {
            1.0
        } else {
            let d = self.b - x;
            (-(d * d) / (x - self.a)).exp()
        }
    }
}

pub fn smooth_step(a: f64, b: f64, x: f64) -> Result<f64> {
    Ok(SmoothStep::new(a, b)?.eval(x))
}

/// Smoothing width `ε` and truncation bound `M`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothingSpec {
    pub epsilon: f64,
    #[serde(rename = "bound")]
    pub m: f64,
}

impl SmoothingSpec {
    pub fn new(epsilon: f64, m: f64) -> Result<Self> {
        let spec = Self { epsilon, m };
        spec.validate()?;
        Ok(spec)
    }

    /// `ε = 0.5`, `M = N / 2`.
    pub fn default_for(capacity: u32) -> Result<Self> {
        Self::new(0.5, capacity as f64 / 2.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.m.is_finite()) {
            return Err(Error::InvalidPolicy("smoothing parameters must be finite".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon < self.m / 2.0) {
            return Err(Error::InvalidPolicy(format!(
                "need 0 < epsilon < M/2 (epsilon = {}, M = {})",
                self.epsilon, self.m
            )));
        }
        Ok(())
    }

    pub fn validate_for(&self, capacity: u32) -> Result<()> {
        self.validate()?;
        if self.m >= capacity as f64 {
            return Err(Error::InvalidPolicy(format!(
                "truncation bound M = {} must be below capacity {capacity}",
                self.m
            )));
        }
        Ok(())
    }

    fn lower(&self) -> SmoothStep {
        SmoothStep {
            a: 0.0,
            b: self.epsilon,
        }
    }

    fn upper(&self) -> SmoothStep {
        SmoothStep {
            a: self.m - self.epsilon,
            b: self.m,
        }
    }

    /// Trial count of the binomial rule, `⌈M⌉`.
    pub fn trials(&self) -> u32 {
        self.m.ceil() as u32
    }
}

/// The smoothed parameter `θ_{ε,M}`: identity on `[ε, M-ε]`, exponential
/// tails towards 0 and `M`, glued with [`SmoothStep`]. The result is kept in
/// the open interval `(0, M)` even where the tails underflow.
pub fn smooth_param(theta: f64, spec: &SmoothingSpec) -> f64 {
    let eps = spec.epsilon;
    let m = spec.m;
    let h_lo = |t: f64| eps / 3.0 * (t / eps).exp();
    let h_hi = |t: f64| m - eps / 3.0 * (-(t - m) / eps).exp();
    let raw = if theta < 0.0 {
        h_lo(theta)
    } else if theta <= eps {
        let s = spec.lower().eval(theta);
        h_lo(theta) * (1.0 - s) + theta * s
    } else if theta < m - eps {
        theta
    } else if theta <= m {
        let s = spec.upper().eval(theta);
        theta * (1.0 - s) + h_hi(theta) * s
    } else {
        h_hi(theta)
    };
    raw.clamp(f64::MIN_POSITIVE, m.next_down())
}

/// Penalty `b(θ)`: zero on `[ε, M-ε]`, quadratic outside `[0, M]`.
pub fn penalty(theta: f64, spec: &SmoothingSpec) -> f64 {
    let below = 1.0 - spec.lower().eval(theta);
    let above = spec.upper().eval(theta);
    let lo = theta - spec.epsilon;
    let hi = theta - spec.m + spec.epsilon;
    below * lo * lo + above * hi * hi
}

/// Spawn cap `N - busy - init - 1`: leaves one cold server for the init1.
fn spawn_cap(x: &SystemState, capacity: u32) -> u32 {
    (capacity as i64 - x.busy as i64 - x.init as i64 - 1).max(0) as u32
}

/// Number of init0 servers to spawn under the simplified rule, given a
/// uniform draw `v`:
/// `min{(⌊θ⌋ + 1{v < θ-⌊θ⌋} - init + blocked)⁺, N - busy - init - 1}`.
pub fn simplified_rule(x: &SystemState, theta: f64, v: f64, capacity: u32) -> u32 {
    let floor = theta.floor();
    let bump = if v < theta - floor { 1.0 } else { 0.0 };
    let wanted = floor + bump - x.unbound_init() as f64;
    let cap = spawn_cap(x, capacity) as f64;
    wanted.min(cap).max(0.0) as u32
}

/// Binomial draw with mean `θ_{ε,M}` over `⌈M⌉` trials, before any state cap.
pub fn binomial_rule<R: Rng + ?Sized>(theta: f64, spec: &SmoothingSpec, rng: &mut R) -> u32 {
    let trials = spec.trials();
    let p = (smooth_param(theta, spec) / trials as f64).clamp(0.0, 1.0);
    Binomial::new(trials as u64, p)
        .expect("binomial parameters in range")
        .sample(rng) as u32
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "rule")]
pub enum PolicyKind {
    Simplified,
    BinomialSmoothed(SmoothingSpec),
}

/// A scale-up rule together with its reserve parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolicySpec {
    pub kind: PolicyKind,
    pub theta: f64,
}

impl PolicySpec {
    pub fn simplified(theta: f64) -> Self {
        Self {
            kind: PolicyKind::Simplified,
            theta,
        }
    }

    pub fn binomial(theta: f64, smoothing: SmoothingSpec) -> Self {
        Self {
            kind: PolicyKind::BinomialSmoothed(smoothing),
            theta,
        }
    }

    pub fn with_theta(&self, theta: f64) -> Self {
        Self {
            kind: self.kind,
            theta,
        }
    }

    pub fn validate_for(&self, capacity: u32) -> Result<()> {
        if !self.theta.is_finite() {
            return Err(Error::InvalidPolicy(format!("theta = {}", self.theta)));
        }
        match &self.kind {
            PolicyKind::Simplified => Ok(()),
            PolicyKind::BinomialSmoothed(s) => s.validate_for(capacity),
        }
    }

    /// Exact law of the number of init0 servers spawned at `x` (which must
    /// have no idle-on and at least one cold server), as `(count, mass)`
    /// pairs with positive mass, sorted by count.
    pub fn pi_distribution(&self, x: &SystemState, capacity: u32) -> Vec<(u32, f64)> {
        match &self.kind {
            PolicyKind::Simplified => {
                let frac = self.theta - self.theta.floor();
                // v < frac happens with probability frac.
                let low = simplified_rule(x, self.theta, 1.0, capacity);
                let high = simplified_rule(x, self.theta, 0.0, capacity);
                if low == high || frac == 0.0 {
                    vec![(low, 1.0)]
                } else {
                    vec![(low, 1.0 - frac), (high, frac)]
                }
            }
            PolicyKind::BinomialSmoothed(spec) => {
                let trials = spec.trials();
                let p = (smooth_param(self.theta, spec) / trials as f64).clamp(0.0, 1.0);
                let law = BinomialPmf::new(p, trials as u64).expect("binomial parameters");
                let cap = spawn_cap(x, capacity).min(trials);
                let mut out: Vec<(u32, f64)> = (0..cap).map(|k| (k, law.pmf(k as u64))).collect();
                let below: f64 = out.iter().map(|(_, m)| m).sum();
                out.push((cap, (1.0 - below).max(0.0)));
                out.retain(|&(_, m)| m > 0.0);
                out
            }
        }
    }

    pub fn compile(&self, capacity: u32) -> CompiledPolicy {
        match &self.kind {
            PolicyKind::Simplified => CompiledPolicy::Simplified {
                theta: self.theta,
                capacity,
            },
            PolicyKind::BinomialSmoothed(spec) => {
                let trials = spec.trials();
                let p = (smooth_param(self.theta, spec) / trials as f64).clamp(0.0, 1.0);
                CompiledPolicy::Binomial {
                    law: Binomial::new(trials as u64, p).expect("binomial parameters"),
                    capacity,
                }
            }
        }
    }
}

/// A policy prepared for repeated sampling inside a simulation loop.
#[derive(Clone, Debug)]
pub enum CompiledPolicy {
    Simplified { theta: f64, capacity: u32 },
    Binomial { law: Binomial, capacity: u32 },
}

impl CompiledPolicy {
    pub fn sample<R: Rng + ?Sized>(&self, x: &SystemState, rng: &mut R) -> u32 {
        match self {
            CompiledPolicy::Simplified { theta, capacity } => {
                let v: f64 = rng.random();
                simplified_rule(x, *theta, v, *capacity)
            }
            CompiledPolicy::Binomial { law, capacity } => {
                (law.sample(rng) as u32).min(spawn_cap(x, *capacity))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(eps: f64, m: f64) -> SmoothingSpec {
        SmoothingSpec::new(eps, m).unwrap()
    }

    #[test]
    fn smooth_step_values() {
        assert_eq!(smooth_step(0.0, 1.0, -1.0).unwrap(), 0.0);
        assert_eq!(smooth_step(0.0, 1.0, 2.0).unwrap(), 1.0);
        let mid = smooth_step(0.0, 1.0, 0.5).unwrap();
        assert!((mid - (-0.5f64).exp()).abs() < 1e-12);
        assert!((mid - 0.606531).abs() < 1e-6);
        assert!(smooth_step(1.0, 1.0, 0.0).is_err());
        assert!(smooth_step(2.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn smooth_step_monotone_on_grid() {
        let psi = SmoothStep::new(0.0, 1.0).unwrap();
        let mut prev = psi.eval(-0.5);
        for i in 0..10_000 {
            let x = -0.5 + 2.0 * i as f64 / 9_999.0;
            let y = psi.eval(x);
            assert!(y >= prev, "decrease at {x}");
            prev = y;
        }
    }

    #[test]
    fn smooth_step_has_bounded_difference_quotient() {
        let (a, b) = (0.0, 1.0);
        let psi = SmoothStep::new(a, b).unwrap();
        let h = 1e-4;
        let mut max_slope: f64 = 0.0;
        let mut x = a - 1.0;
        while x <= b + 1.0 {
            let d = (psi.eval(x + h) - psi.eval(x - h)) / (2.0 * h);
            assert!(d.is_finite() && d >= -1e-9);
            max_slope = max_slope.max(d);
            x += h;
        }
        // Steepest slope of exp(-(1-x)^2/x) on (0,1) is about 2.1.
        assert!(max_slope < 3.0, "max slope {max_slope}");
        // Jumps between neighbouring grid points stay of order h.
        let mut x = a - 1.0;
        while x <= b + 1.0 {
            assert!((psi.eval(x + h) - psi.eval(x)).abs() < 3.0 * h);
            x += h;
        }
    }

    #[test]
    fn smooth_param_examples() {
        let s = spec(0.5, 10.0);
        assert_eq!(smooth_param(5.0, &s), 5.0);
        assert!((smooth_param(0.0, &s) - 0.5 / 3.0).abs() < 1e-15);
        let far = smooth_param(-10.0, &s);
        assert!((far - 0.5 / 3.0 * (-20.0f64).exp()).abs() < 1e-22);
        assert!((far - 3.4e-10).abs() < 1e-11);
        assert!((smooth_param(1e6, &s) - 10.0).abs() < 1e-12);
    }

    #[test]
    fn smooth_param_identity_and_range_on_grid() {
        let s = spec(0.5, 10.0);
        for i in 0..=1000 {
            let t = 0.5 + 9.0 * i as f64 / 1000.0;
            assert_eq!(smooth_param(t, &s), t);
        }
        for i in 0..=200_000 {
            let t = -1000.0 + 2000.0 * i as f64 / 200_000.0;
            let v = smooth_param(t, &s);
            assert!(v > 0.0 && v < 10.0, "theta_eps_M({t}) = {v}");
        }
    }

    #[test]
    fn smooth_param_is_continuous_at_junctions() {
        let s = spec(0.5, 10.0);
        for t in [0.0, 0.5, 9.5, 10.0] {
            let l = smooth_param(t - 1e-9, &s);
            let r = smooth_param(t + 1e-9, &s);
            assert!((l - r).abs() < 1e-6, "jump at {t}: {l} vs {r}");
        }
    }

    #[test]
    fn simplified_rule_examples() {
        let x = SystemState::new(0, 10, 3, 2);
        assert_eq!(simplified_rule(&x, 6.5, 0.7, 50), 5);
        assert_eq!(simplified_rule(&x, 6.5, 0.2, 50), 6);
        assert_eq!(simplified_rule(&SystemState::new(0, 48, 1, 1), 3.0, 0.1, 50), 0);
        for v in [0.0, 0.3, 0.99] {
            assert_eq!(simplified_rule(&SystemState::new(0, 3, 2, 2), 0.0, v, 50), 0);
        }
        // Overfull: busy + init >= N clamps to 0.
        assert_eq!(simplified_rule(&SystemState::new(0, 30, 20, 1), 9.0, 0.5, 50), 0);
        assert_eq!(simplified_rule(&SystemState::EMPTY, -4.2, 0.5, 50), 0);
    }

    #[test]
    fn pi_distribution_simplified() {
        let x = SystemState::new(0, 10, 3, 2);
        let d = PolicySpec::simplified(6.5).pi_distribution(&x, 50);
        assert_eq!(d, vec![(5, 0.5), (6, 0.5)]);
        let d = PolicySpec::simplified(6.0).pi_distribution(&x, 50);
        assert_eq!(d, vec![(5, 1.0)]);
        let d = PolicySpec::simplified(6.25).pi_distribution(&x, 50);
        assert_eq!(d, vec![(5, 0.75), (6, 0.25)]);
    }

    #[test]
    fn pi_distribution_binomial_truncates_onto_cap() {
        let s = spec(0.5, 10.0);
        let policy = PolicySpec::binomial(5.0, s);
        // Uncapped: the full Binomial(10, 0.5) law.
        let d = policy.pi_distribution(&SystemState::EMPTY, 50);
        assert_eq!(d.len(), 11);
        let c = |k: u64| (1..=k).fold(1.0, |acc, i| acc * (10 - i + 1) as f64 / i as f64);
        for (k, m) in &d {
            assert!((m - c(*k as u64) / 1024.0).abs() < 1e-14);
        }
        // Cap of 2 leaves P(0), P(1) and the tail mass on 2.
        let x = SystemState::new(0, 30, 17, 3);
        let d = policy.pi_distribution(&x, 50);
        assert_eq!(d.len(), 3);
        assert!((d[0].1 - 1.0 / 1024.0).abs() < 1e-15);
        assert!((d[1].1 - 10.0 / 1024.0).abs() < 1e-15);
        assert!((d[2].1 - 1013.0 / 1024.0).abs() < 1e-12);
    }

    #[test]
    fn binomial_mean_matches_smoothed_theta() {
        let s = spec(0.5, 10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 1_000_000;
        let total: u64 = (0..n).map(|_| binomial_rule(5.0, &s, &mut rng) as u64).sum();
        let mean = total as f64 / n as f64;
        // sd of the mean is sqrt(2.5)/1000 ~ 0.0016.
        assert!((mean - 5.0).abs() < 0.01, "mean {mean}");
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        assert!((0..1000).all(|_| binomial_rule(-1e4, &s, &mut rng) == 0));
    }

    #[test]
    fn non_integer_bound_rounds_trials_up() {
        let s = spec(0.5, 7.5);
        assert_eq!(s.trials(), 8);
        let d = PolicySpec::binomial(3.0, s).pi_distribution(&SystemState::EMPTY, 50);
        let mean: f64 = d.iter().map(|(k, m)| *k as f64 * m).sum();
        assert!((mean - 3.0).abs() < 1e-12);
    }

    #[test]
    fn penalty_examples() {
        let s = spec(0.5, 10.0);
        assert_eq!(penalty(5.0, &s), 0.0);
        assert!((penalty(-2.0, &s) - 6.25).abs() < 1e-12);
        assert!((penalty(12.0, &s) - 6.25).abs() < 1e-12);
    }

    #[test]
    fn penalty_vanishes_exactly_on_identity_region() {
        let s = spec(0.5, 10.0);
        for i in 0..=20_000 {
            let t = -5.0 + 20.0 * i as f64 / 20_000.0;
            let p = penalty(t, &s);
            let inside = (0.5..=9.5).contains(&t);
            // Flat to all orders at the edges, so zero is tested exactly.
            assert_eq!(p == 0.0, inside, "b({t}) = {p}");
        }
    }

    #[test]
    fn smoothing_validation() {
        assert!(SmoothingSpec::new(0.5, 10.0).is_ok());
        assert!(SmoothingSpec::new(0.0, 10.0).is_err());
        assert!(SmoothingSpec::new(5.0, 10.0).is_err());
        assert!(SmoothingSpec::new(0.5, 10.0).unwrap().validate_for(10).is_err());
        assert!(SmoothingSpec::new(0.5, 10.0).unwrap().validate_for(11).is_ok());
    }

    #[test]
    fn pi_distribution_mean_matches_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cases = [
            (PolicySpec::simplified(3.3), SystemState::new(0, 2, 1, 1), 10),
            (PolicySpec::binomial(2.2, spec(0.5, 4.5)), SystemState::new(0, 3, 2, 1), 10),
        ];
        for (policy, x, n) in cases {
            let d = policy.pi_distribution(&x, n);
            let mass: f64 = d.iter().map(|(_, m)| m).sum();
            assert!((mass - 1.0).abs() < 1e-12);
            let mean: f64 = d.iter().map(|(k, m)| *k as f64 * m).sum();
            let var: f64 = d.iter().map(|(k, m)| (*k as f64 - mean).powi(2) * m).sum();
            let compiled = policy.compile(n);
            let samples = 100_000;
            let total: u64 = (0..samples).map(|_| compiled.sample(&x, &mut rng) as u64).sum();
            let mc = total as f64 / samples as f64;
            let se = (var / samples as f64).sqrt();
            assert!((mc - mean).abs() <= 3.0 * se + 1e-12, "{mc} vs {mean} (se {se})");
        }
    }

    proptest! {
        #[test]
        fn simplified_rule_respects_cap(
            idle in 0u32..1, busy in 0u32..20, init in 0u32..20, blocked_frac in 0.0f64..=1.0,
            theta in -30.0f64..60.0, v in 0.0f64..1.0,
        ) {
            let n = 40;
            let blocked = (init as f64 * blocked_frac).floor() as u32;
            let x = SystemState::new(idle, busy, init, blocked);
            prop_assume!(x.is_valid(n));
            let pi = simplified_rule(&x, theta, v, n);
            let cap = (n as i64 - busy as i64 - init as i64 - 1).max(0) as u32;
            prop_assert!(pi <= cap);
        }

        #[test]
        fn pi_distribution_is_a_pmf(theta in -20.0f64..40.0, busy in 0u32..30, init in 0u32..15) {
            let n = 50;
            let x = SystemState::new(0, busy, init, init / 2);
            prop_assume!(x.cold(n) > 0);
            for policy in [PolicySpec::simplified(theta), PolicySpec::binomial(theta, spec(0.5, 20.0))] {
                let d = policy.pi_distribution(&x, n);
                let mass: f64 = d.iter().map(|(_, m)| m).sum();
                prop_assert!((mass - 1.0).abs() < 1e-12);
                prop_assert!(d.iter().all(|&(k, m)| m > 0.0 && k < x.cold(n)));
            }
        }

        #[test]
        fn penalty_is_nonnegative(theta in -1e3f64..1e3) {
            prop_assert!(penalty(theta, &spec(0.5, 10.0)) >= 0.0);
        }
    }
}
