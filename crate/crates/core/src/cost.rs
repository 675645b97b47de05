//! Instant platform cost and the penalized sample cost seen by the optimizer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SystemState;
use crate::policy::{penalty, SmoothingSpec};

/// Linear weights on the four state counts plus a rejection weight.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostWeights {
    pub idle: f64,
    pub busy: f64,
    pub init: f64,
    pub blocked: f64,
    pub rejection: f64,
}

impl Default for CostWeights {
    /// `(1, 1, 5, 100)` with a rejection weight of `10³`.
    fn default() -> Self {
        Self {
            idle: 1.0,
            busy: 1.0,
            init: 5.0,
            blocked: 100.0,
            rejection: 1e3,
        }
    }
}

impl CostWeights {
    pub fn zero() -> Self {
        Self {
            idle: 0.0,
            busy: 0.0,
            init: 0.0,
            blocked: 0.0,
            rejection: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.idle, self.busy, self.init, self.blocked, self.rejection];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidWeights(format!(
                "weights must be finite and nonnegative, got {all:?}"
            )));
        }
        Ok(())
    }

    /// `Σ wᵢ·N + w_rej`, an upper bound of [`instant_cost`] over the state space.
    pub fn upper_bound(&self, capacity: u32) -> f64 {
        (self.idle + self.busy + self.init + self.blocked) * capacity as f64 + self.rejection
    }
}

pub fn is_saturated(x: &SystemState, capacity: u32) -> bool {
    x.jobs() == capacity
}

/// `C(x) = Σ wᵢ xᵢ + 1{busy + blocked = N}·w_rej`.
pub fn instant_cost(x: &SystemState, w: &CostWeights, capacity: u32) -> f64 {
    let linear = w.idle * x.idle as f64
        + w.busy * x.busy as f64
        + w.init * x.init as f64
        + w.blocked * x.blocked as f64;
    if is_saturated(x, capacity) {
        linear + w.rejection
    } else {
        linear
    }
}

/// `F(θ, x) = C(x) + b(θ)`.
pub fn sample_cost(
    theta: f64,
    x: &SystemState,
    w: &CostWeights,
    spec: &SmoothingSpec,
    capacity: u32,
) -> f64 {
    instant_cost(x, w, capacity) + penalty(theta, spec)
}
