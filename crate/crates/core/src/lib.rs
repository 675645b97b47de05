//! Scale-per-request serverless platform as a continuous-time Markov chain,
//! with an exact stationary cost oracle and a non-stationary
//! Kiefer–Wolfowitz search over the reserve-capacity parameter `θ`.
//!
//! ```
//! use kwscale::{CostWeights, ModelParams, Oracle, PolicyKind};
//!
//! let oracle = Oracle::new(ModelParams::reference(0.3, 4), CostWeights::default(), PolicyKind::Simplified)?;
//! let point = oracle.evaluate(1.5)?;
//! assert!(point.cost > 0.0 && point.residual < 1e-10);
//! # Ok::<(), kwscale::Error>(())
//! ```

pub mod cost;
pub mod error;
pub mod model;
pub mod optimizer;
pub mod policy;
pub mod simulator;
pub mod stationary;
pub mod stats;

pub use cost::{instant_cost, sample_cost, CostWeights};
pub use error::{Error, Result};
pub use model::{
    build_generator, enumerate_states, out_transitions, Generator, ModelParams, ServiceHandoff,
    StateSpace, SystemState,
};
pub use optimizer::{
    kw_step, run_fast_update, run_kw, FastRun, GammaScaling, KwConfig, KwRun, Schedules, TauRule,
    Trajectory, TrajectoryPoint,
};
pub use policy::{penalty, smooth_param, smooth_step, PolicyKind, PolicySpec, SmoothingSpec};
pub use simulator::{run_episode, simulate_segment, EpisodeRecord, RngStream};
pub use stationary::{solve_stationary, Oracle, OraclePoint, SolverKind, SolverOptions};
