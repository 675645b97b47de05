//! Experiment configuration, one TOML file per experiment.

use std::path::{Path, PathBuf};

use kwscale::optimizer::GammaScaling;
use kwscale::stationary::SolverOptions;
use kwscale::{CostWeights, KwConfig, ModelParams, PolicyKind, Schedules, SmoothingSpec};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelParams,
    #[serde(default)]
    pub weights: CostWeights,
    #[serde(default = "simplified")]
    pub policy: PolicyKind,
    /// Penalty added to observed costs during the search.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub penalty: Option<SmoothingSpec>,
    #[serde(default)]
    pub schedules: Schedules,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub sweep: SweepOptions,
    #[serde(default)]
    pub kw: KwOptions,
    #[serde(default)]
    pub fast: FastOptions,
    #[serde(default)]
    pub validate: ValidateOptions,
}

fn simplified() -> PolicyKind {
    PolicyKind::Simplified
}

fn default_seeds() -> Vec<u64> {
    vec![1]
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepOptions {
    /// Defaults to the integers in the admissible range, at most 15.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<Vec<f64>>,
    /// Refine the grid minimum by golden-section search.
    pub refine: bool,
    pub solver: SolverOptions,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            grid: None,
            refine: true,
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KwOptions {
    pub theta0: Vec<f64>,
    /// Reference minimizer for the replication summary.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta_star: Option<f64>,
    /// Write a JSON-lines episode trace next to each trajectory.
    pub trace: bool,
}

impl Default for KwOptions {
    fn default() -> Self {
        Self {
            theta0: vec![1.0, 10.0],
            theta_star: None,
            trace: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FastOptions {
    pub update_every: Vec<u64>,
    pub scenarios: Vec<GammaScaling>,
    pub theta0: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta_star: Option<f64>,
}

impl Default for FastOptions {
    fn default() -> Self {
        Self {
            update_every: vec![100, 1000],
            scenarios: vec![GammaScaling::Unscaled, GammaScaling::PerStep],
            theta0: 1.0,
            theta_star: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidateOptions {
    /// Largest capacity enumerated by the structural checks.
    pub max_capacity: u32,
    /// Steps of the simulation cross-check at capacity 5.
    pub mc_steps: u64,
    pub mc_theta: f64,
}

impl Default for ValidateOptions {
    fn default() -> Self {
        Self {
            max_capacity: 6,
            mc_steps: 2_000_000,
            mc_theta: 2.0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let config: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |e: kwscale::Error| CliError::Config(e.to_string());
        self.model.validate().map_err(cfg)?;
        self.weights.validate().map_err(cfg)?;
        self.schedules.validate().map_err(cfg)?;
        if let PolicyKind::BinomialSmoothed(spec) = &self.policy {
            spec.validate_for(self.model.capacity).map_err(cfg)?;
        }
        if let Some(spec) = &self.penalty {
            spec.validate().map_err(cfg)?;
        }
        if self.seeds.is_empty() {
            return Err(CliError::Config("seeds must not be empty".into()));
        }
        let (lo, hi) = self.grid_range();
        if let Some(t) = self.grid().iter().find(|t| !(lo..=hi).contains(*t)) {
            return Err(CliError::Config(format!("grid point {t} outside [{lo}, {hi}]")));
        }
        if self.kw.theta0.iter().chain([&self.fast.theta0]).any(|t| !t.is_finite()) {
            return Err(CliError::Config("theta0 must be finite".into()));
        }
        if self.fast.update_every.contains(&0) {
            return Err(CliError::Config("update_every must be positive".into()));
        }
        for s in &self.fast.scenarios {
            if let GammaScaling::Factor(f) = s {
                if !(f.is_finite() && *f >= 0.0) {
                    return Err(CliError::Config(format!("gamma factor {f} must be finite and >= 0")));
                }
            }
        }
        if self.validate.max_capacity == 0 {
            return Err(CliError::Config("validate.max_capacity must be positive".into()));
        }
        Ok(())
    }

    /// Admissible sweep range: `[0, M]` under the smoothed rule, `[0, N]`
    /// otherwise.
    pub fn grid_range(&self) -> (f64, f64) {
        match &self.policy {
            PolicyKind::BinomialSmoothed(spec) => (0.0, spec.m),
            PolicyKind::Simplified => (0.0, self.model.capacity as f64),
        }
    }

    pub fn grid(&self) -> Vec<f64> {
        match &self.sweep.grid {
            Some(g) => g.clone(),
            None => (0..=self.grid_range().1.min(15.0) as u32).map(f64::from).collect(),
        }
    }

    pub fn kw_config(&self, seed: u64, theta0: f64) -> KwConfig {
        KwConfig {
            params: self.model,
            kind: self.policy,
            weights: self.weights,
            penalty: self.penalty,
            schedules: self.schedules,
            theta0,
            seed,
        }
    }
}
