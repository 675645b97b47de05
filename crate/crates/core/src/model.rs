//! Controlled continuous-time Markov chain of a scale-per-request platform.
//!
//! A state counts idle-on, busy and initializing servers, together with the
//! number of initializing servers already bound to a waiting job. Cold
//! servers are whatever is left of the capacity `N`. The chain is embedded
//! into a discrete-time kernel by uniformization with the rate
//! `λ + N(μ + β + γ)`, which bounds the total outflow of every state.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::PolicySpec;

/// Platform state `(idle, busy, init, blocked)`.
///
/// `init` counts both unbound (init0) and bound (init1) initializing servers;
/// `blocked` counts the bound ones, which equals the number of queued jobs.
/// The derived ordering is lexicographic over the four counts.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
pub struct SystemState {
    pub idle: u32,
    pub busy: u32,
    pub init: u32,
    pub blocked: u32,
}

impl SystemState {
    pub const EMPTY: SystemState = SystemState::new(0, 0, 0, 0);

    pub const fn new(idle: u32, busy: u32, init: u32, blocked: u32) -> Self {
        Self {
            idle,
            busy,
            init,
            blocked,
        }
    }

    pub fn is_valid(&self, capacity: u32) -> bool {
        self.blocked <= self.init
            && (self.idle as u64 + self.busy as u64 + self.init as u64) <= capacity as u64
    }

    /// Number of cold (switched off) servers. Assumes a valid state.
    pub fn cold(&self, capacity: u32) -> u32 {
        capacity - self.idle - self.busy - self.init
    }

    /// Initializing servers not bound to any job.
    pub fn unbound_init(&self) -> u32 {
        self.init - self.blocked
    }

    /// Jobs present in the system, served or waiting.
    pub fn jobs(&self) -> u32 {
        self.busy + self.blocked
    }

    pub fn as_array(&self) -> [u32; 4] {
        [self.idle, self.busy, self.init, self.blocked]
    }
}

impl fmt::Display for SystemState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({},{},{},{})",
            self.idle, self.busy, self.init, self.blocked
        )
    }
}

/// What happens to the job queued behind an init1 server when a busy server
/// frees up and takes that job instead.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ServiceHandoff {
    /// The init1 server keeps initializing, now unbound: `x - e4`.
    #[default]
    Unbind,
    /// The init1 server is aborted and returns to cold: `x - e3 - e4`.
    Cancel,
    /// The queued job keeps waiting for its own init1 server; the freed
    /// server becomes idle-on: `x + e1 - e2`.
    Keep,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    /// Job arrival rate.
    pub lambda: f64,
    /// Service rate.
    pub mu: f64,
    /// Initialization (cold start) rate.
    pub beta: f64,
    /// Expiration rate of idle-on servers.
    pub gamma_exp: f64,
    /// Server capacity `N`.
    pub capacity: u32,
    #[serde(default)]
    pub handoff: ServiceHandoff,
}

impl ModelParams {
    pub fn new(lambda: f64, mu: f64, beta: f64, gamma_exp: f64, capacity: u32) -> Result<Self> {
        let params = Self {
            lambda,
            mu,
            beta,
            gamma_exp,
            capacity,
            handoff: ServiceHandoff::default(),
        };
        params.validate()?;
        Ok(params)
    }

    /// Rates used throughout the numerical study, for a given arrival rate
    /// and capacity: `μ = 1`, `β = 0.1`, `γ = 0.01`.
    pub fn reference(lambda: f64, capacity: u32) -> Self {
        Self {
            lambda,
            mu: 1.0,
            beta: 0.1,
            gamma_exp: 0.01,
            capacity,
            handoff: ServiceHandoff::default(),
        }
    }

    pub fn with_handoff(mut self, handoff: ServiceHandoff) -> Self {
        self.handoff = handoff;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda", self.lambda),
            ("mu", self.mu),
            ("beta", self.beta),
            ("gamma_exp", self.gamma_exp),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParams(format!(
                    "{name} must be finite and > 0 (got {v})"
                )));
            }
        }
        if self.capacity == 0 {
            return Err(Error::InvalidParams("capacity must be >= 1".into()));
        }
        Ok(())
    }
}

/// Uniformization constant `Λ = λ + N(μ + β + γ)`.
pub fn uniformization_rate(params: &ModelParams) -> f64 {
    params.lambda + params.capacity as f64 * (params.mu + params.beta + params.gamma_exp)
}

/// How an arrival is resolved in a given state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArrivalKind {
    /// An idle-on server takes the job.
    Dispatch,
    /// No idle-on server and some cold ones: spawn one init1 plus `π` init0.
    ScaleUp,
    /// No idle-on and no cold server, but an unbound init server exists.
    BindInit,
    /// Every server is busy or bound: the job is lost.
    Reject,
}

pub fn arrival_kind(x: &SystemState, capacity: u32) -> ArrivalKind {
    if x.idle > 0 {
        ArrivalKind::Dispatch
    } else if x.cold(capacity) > 0 {
        ArrivalKind::ScaleUp
    } else if x.init > x.blocked {
        ArrivalKind::BindInit
    } else {
        ArrivalKind::Reject
    }
}

/// Successor of an arrival of the given kind; `extra` is the number of init0
/// servers spawned and only matters for [`ArrivalKind::ScaleUp`].
pub fn after_arrival(x: &SystemState, kind: ArrivalKind, extra: u32) -> SystemState {
    match kind {
        ArrivalKind::Dispatch => SystemState::new(x.idle - 1, x.busy + 1, x.init, x.blocked),
        ArrivalKind::ScaleUp => SystemState::new(x.idle, x.busy, x.init + extra + 1, x.blocked + 1),
        ArrivalKind::BindInit => SystemState::new(x.idle, x.busy, x.init, x.blocked + 1),
        ArrivalKind::Reject => *x,
    }
}

/// Successor of a service completion. Requires `busy > 0`.
pub fn after_service(x: &SystemState, handoff: ServiceHandoff) -> SystemState {
    if x.blocked == 0 {
        SystemState::new(x.idle + 1, x.busy - 1, x.init, 0)
    } else {
        match handoff {
            ServiceHandoff::Unbind => SystemState::new(x.idle, x.busy, x.init, x.blocked - 1),
            ServiceHandoff::Cancel => {
                SystemState::new(x.idle, x.busy, x.init - 1, x.blocked - 1)
            }
            ServiceHandoff::Keep => SystemState::new(x.idle + 1, x.busy - 1, x.init, x.blocked),
        }
    }
}

/// Successor of an expiration. Requires `idle > 0`.
pub fn after_expiration(x: &SystemState) -> SystemState {
    SystemState::new(x.idle - 1, x.busy, x.init, x.blocked)
}

/// Successor of an initialization completion. Requires `init > 0`.
pub fn after_init(x: &SystemState) -> SystemState {
    if x.blocked > 0 {
        SystemState::new(x.idle, x.busy + 1, x.init - 1, x.blocked - 1)
    } else {
        SystemState::new(x.idle + 1, x.busy, x.init - 1, 0)
    }
}

/// Outgoing transitions of a state, as `(rate, next)` pairs with positive
/// rates. A rejected arrival shows up as a self-loop.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TransitionDistribution {
    pub entries: Vec<(f64, SystemState)>,
}

impl TransitionDistribution {
    pub fn total_rate(&self) -> f64 {
        self.entries.iter().map(|(r, _)| r).sum()
    }

    /// Rate towards `next`, summed over duplicate entries.
    pub fn rate_to(&self, next: &SystemState) -> f64 {
        self.entries
            .iter()
            .filter(|(_, s)| s == next)
            .map(|(r, _)| r)
            .sum()
    }
}

pub fn out_transitions(
    x: &SystemState,
    policy: &PolicySpec,
    params: &ModelParams,
) -> TransitionDistribution {
    let n = params.capacity;
    debug_assert!(x.is_valid(n), "state {x} outside capacity {n}");
    let mut entries = Vec::with_capacity(6);

    let kind = arrival_kind(x, n);
    match kind {
        ArrivalKind::ScaleUp => {
            for (extra, mass) in policy.pi_distribution(x, n) {
                if mass > 0.0 {
                    entries.push((params.lambda * mass, after_arrival(x, kind, extra)));
                }
            }
        }
        _ => entries.push((params.lambda, after_arrival(x, kind, 0))),
    }
    if x.busy > 0 {
        entries.push((params.mu * x.busy as f64, after_service(x, params.handoff)));
    }
    if x.idle > 0 {
        entries.push((params.gamma_exp * x.idle as f64, after_expiration(x)));
    }
    if x.init > 0 {
        entries.push((params.beta * x.init as f64, after_init(x)));
    }
    TransitionDistribution { entries }
}

/// One row of the uniformized kernel `P = I + Q/Λ`, merged by target.
///
/// Panics if the outflow of `x` exceeds the uniformization rate.
pub fn dtmc_row(
    x: &SystemState,
    policy: &PolicySpec,
    params: &ModelParams,
) -> Vec<(SystemState, f64)> {
    let rate = uniformization_rate(params);
    let mut row: Vec<(SystemState, f64)> = Vec::new();
    let mut leave = 0.0;
    for (r, next) in out_transitions(x, policy, params).entries {
        if next == *x {
            continue;
        }
        leave += r;
        match row.iter_mut().find(|(s, _)| *s == next) {
            Some((_, p)) => *p += r / rate,
            None => row.push((next, r / rate)),
        }
    }
    let stay = 1.0 - leave / rate;
    assert!(
        stay >= -1e-12,
        "uniformization bound violated at {x}: self-loop mass {stay}"
    );
    row.push((*x, stay.max(0.0)));
    row.sort_by(|a, b| a.0.cmp(&b.0));
    row
}

/// All valid states for a capacity, in lexicographic order, with an O(1)
/// state-to-index map.
#[derive(Clone, Debug)]
pub struct StateSpace {
    capacity: u32,
    states: Vec<SystemState>,
    // Index of (idle, busy, init, 0) for each (idle, busy, init) triple.
    base: Vec<u32>,
}

impl StateSpace {
    pub fn enumerate(capacity: u32) -> Self {
        let n = capacity as usize;
        let side = n + 1;
        let mut base = vec![u32::MAX; side * side * side];
        let mut states = Vec::new();
        for idle in 0..=capacity {
            for busy in 0..=capacity - idle {
                for init in 0..=capacity - idle - busy {
                    base[(idle as usize * side + busy as usize) * side + init as usize] =
                        states.len() as u32;
                    for blocked in 0..=init {
                        states.push(SystemState::new(idle, busy, init, blocked));
                    }
                }
            }
        }
        Self {
            capacity,
            states,
            base,
        }
    }

    pub fn capacity(&self) -> u32 {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn states(&self) -> &[SystemState] {
        &self.states
    }

    pub fn state(&self, index: usize) -> SystemState {
        self.states[index]
    }

    pub fn index_of(&self, x: &SystemState) -> Option<usize> {
        if !x.is_valid(self.capacity) {
            return None;
        }
        let side = self.capacity as usize + 1;
        let b = self.base[(x.idle as usize * side + x.busy as usize) * side + x.init as usize];
        Some(b as usize + x.blocked as usize)
    }
}

/// `enumerate_states` under its operational name.
pub fn enumerate_states(capacity: u32) -> StateSpace {
    StateSpace::enumerate(capacity)
}

/// Sparse generator in compressed-row form. Diagonal entries are kept
/// separately; off-diagonal entries are strictly positive and sorted by
/// column within each row.
#[derive(Clone, Debug)]
pub struct Generator {
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    rates: Vec<f64>,
    diag: Vec<f64>,
}

impl Generator {
    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    /// Off-diagonal `(column, rate)` pairs of a row.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[span.clone()]
            .iter()
            .zip(&self.rates[span])
            .map(|(&c, &r)| (c as usize, r))
    }

    pub fn diag(&self, i: usize) -> f64 {
        self.diag[i]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return self.diag[i];
        }
        self.row(i).find(|&(c, _)| c == j).map_or(0.0, |(_, r)| r)
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.diag[i] + self.row(i).map(|(_, r)| r).sum::<f64>()
    }

    /// Largest total outflow `-Q[i,i]` over all rows.
    pub fn max_outflow(&self) -> f64 {
        self.diag.iter().fold(0.0, |acc, &d| acc.max(-d))
    }

    /// Builds a generator from per-row off-diagonal `(column, rate)` lists.
    /// Duplicate columns are summed; the diagonal is minus the row total.
    pub fn from_rows(rows: Vec<Vec<(u32, f64)>>) -> Self {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut cols = Vec::new();
        let mut rates = Vec::new();
        let mut diag = Vec::with_capacity(rows.len());
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|&(c, _)| c);
            let mut out = 0.0;
            let start = cols.len();
            for (c, r) in row {
                if cols.len() > start && *cols.last().unwrap() == c {
                    *rates.last_mut().unwrap() += r;
                } else {
                    cols.push(c);
                    rates.push(r);
                }
                out += r;
            }
            diag.push(-out);
            row_ptr.push(cols.len());
        }
        Self {
            row_ptr,
            cols,
            rates,
            diag,
        }
    }

    /// Generator restricted to `keep` (indices into this generator), which
    /// must be closed under transitions. Indices are renumbered in order.
    pub fn restrict(&self, keep: &[usize]) -> Self {
        let mut map = vec![u32::MAX; self.dim()];
        for (new, &old) in keep.iter().enumerate() {
            map[old] = new as u32;
        }
        let rows = keep
            .iter()
            .map(|&old| {
                self.row(old)
                    .map(|(c, r)| {
                        let m = map[c];
                        assert!(m != u32::MAX, "restriction is not closed at row {old}");
                        (m, r)
                    })
                    .collect()
            })
            .collect();
        Self::from_rows(rows)
    }

    /// Incoming transitions: row `j` of the result lists `(i, Q[i,j])`.
    pub fn transpose(&self) -> Self {
        let n = self.dim();
        let mut rows: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n];
        for i in 0..n {
            for (j, r) in self.row(i) {
                rows[j].push((i as u32, r));
            }
        }
        let mut t = Self::from_rows(rows);
        t.diag.copy_from_slice(&self.diag);
        t
    }

    /// Indices reachable from `start` following positive rates, sorted.
    pub fn reachable_from(&self, start: usize) -> Vec<usize> {
        let mut seen = vec![false; self.dim()];
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(i) = queue.pop_front() {
            for (j, _) in self.row(i) {
                if !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        (0..self.dim()).filter(|&i| seen[i]).collect()
    }

    /// `v Q` for a row vector `v`.
    pub fn left_mul(&self, v: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = v.iter().zip(&self.diag).map(|(a, d)| a * d).collect();
        for (i, &vi) in v.iter().enumerate() {
            if vi != 0.0 {
                for (j, r) in self.row(i) {
                    out[j] += vi * r;
                }
            }
        }
        out
    }
}

/// Builds the generator of the chain under `policy`, with the policy's
/// randomization folded into expected rates.
pub fn build_generator(policy: &PolicySpec, params: &ModelParams, space: &StateSpace) -> Generator {
    let rows = space
        .states()
        .iter()
        .map(|x| {
            out_transitions(x, policy, params)
                .entries
                .into_iter()
                .filter(|(_, next)| next != x)
                .map(|(r, next)| {
                    let j = space
                        .index_of(&next)
                        .unwrap_or_else(|| panic!("transition {x} -> {next} leaves the state space"));
                    (j as u32, r)
                })
                .collect()
        })
        .collect();
    Generator::from_rows(rows)
}
