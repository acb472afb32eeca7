//! Run configuration: a flat key-value document covering every tunable,
//! loaded from TOML and echoed verbatim into each run directory so a run
//! can be reproduced bitwise from its output alone.

use crate::ensemble_runtime::{EnsembleLayout, RuntimeError};
use crate::filtering::{NudgeSettings, TemperSettings};
use crate::gaussian_field::MaternParams;
use crate::grid::{GridError, Mesh};
use crate::observing::{ObsConfig, ObsError};
use crate::sch_dynamics::SchParams;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("failed to parse {path}: {source}")]
    Parse {
        path: String,
        source: Box<toml::de::Error>,
    },
    #[error("invalid value for {field}: {message}")]
    Invalid { field: String, message: String },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Obs(#[from] ObsError),
    #[error(transparent)]
    Layout(#[from] RuntimeError),
}

/// Which assimilation algorithm a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterMode {
    Bootstrap,
    Tempered,
    Nudged,
}

impl fmt::Display for FilterMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FilterMode::Bootstrap => "bootstrap",
            FilterMode::Tempered => "tempered",
            FilterMode::Nudged => "nudged",
        };
        f.write_str(s)
    }
}

impl FromStr for FilterMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bootstrap" => Ok(FilterMode::Bootstrap),
            "tempered" => Ok(FilterMode::Tempered),
            "nudged" => Ok(FilterMode::Nudged),
            other => Err(format!(
                "unknown mode '{other}' (expected bootstrap, tempered, or nudged)"
            )),
        }
    }
}

/// Every tunable of a run. Defaults reproduce the full-domain experiment;
/// [`RunConfig::experiment2`] switches to the half-domain one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Domain length L.
    pub length: f64,
    /// Number of mesh cells N.
    pub n_cells: usize,
    /// Helmholtz length scale alpha.
    pub alpha: f64,
    /// Viscosity mu.
    pub mu: f64,
    /// Model time step.
    pub dt: f64,
    /// Model steps per assimilation window N_s.
    pub steps_per_window: usize,
    /// Inverse correlation length of the noise smoothing cascade.
    pub kappa: f64,
    /// Noise amplitude eta.
    pub eta: f64,
    /// Smoothing cascade depth k.
    pub k_smooth: usize,
    /// Number of observation points M.
    pub observation_count: usize,
    /// Extent of the observation grid; points sit at j*extent/M. Defaults
    /// to the domain length (full-domain observations).
    pub observation_extent: Option<f64>,
    /// Observation noise standard deviation (shared by all points).
    pub sigma: f64,
    /// ESS threshold N_p* for adaptive tempering.
    pub ess_threshold: usize,
    /// PCN jittering step parameter delta.
    pub pcn_delta: f64,
    /// Jittering steps per tempering step.
    pub jitter_steps: usize,
    pub max_temper_steps: usize,
    /// Quasi-Newton iterations per nudging stage.
    pub nudge_max_iters: usize,
    pub nudge_grad_tol: f64,
    /// Ensemble size N_p.
    pub n_particles: usize,
    /// Number of parallel batches B.
    pub n_batches: usize,
    pub seed: u64,
    /// Number of assimilation steps to run.
    pub n_assim_steps: usize,
    /// Assimilation steps at which ensemble snapshots are written.
    pub snapshot_steps: Vec<usize>,
    pub newton_tol: f64,
    pub newton_max_iters: usize,
    pub mode: FilterMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            length: 40.0,
            n_cells: 100,
            alpha: 1.0,
            mu: 0.01,
            dt: 0.025,
            steps_per_window: 5,
            kappa: 1.0,
            eta: 1.0,
            k_smooth: 3,
            observation_count: 81,
            observation_extent: None,
            sigma: 0.5f64.sqrt(),
            ess_threshold: 80,
            pcn_delta: 0.15,
            jitter_steps: 5,
            max_temper_steps: 100,
            nudge_max_iters: 20,
            nudge_grad_tol: 1e-6,
            n_particles: 150,
            n_batches: 1,
            seed: 7,
            n_assim_steps: 1000,
            snapshot_steps: vec![1, 100, 500, 1000],
            newton_tol: 1e-9,
            newton_max_iters: 50,
            mode: FilterMode::Tempered,
        }
    }
}

impl RunConfig {
    /// Full-domain observations, 81 points over [0, L).
    pub fn experiment1() -> Self {
        Self::default()
    }

    /// Half-domain observations: 41 points over [0, L/2), 2000 steps.
    pub fn experiment2() -> Self {
        Self {
            observation_count: 41,
            observation_extent: Some(20.0),
            n_assim_steps: 2000,
            snapshot_steps: vec![100, 500, 1000, 2000],
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let config: RunConfig = toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.display().to_string(),
            source: Box::new(source),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        let text = toml::to_string_pretty(self).expect("config serialises");
        std::fs::write(path, text).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |field: &str, message: &str| -> ConfigError {
            ConfigError::Invalid {
                field: field.to_string(),
                message: message.to_string(),
            }
        };
        if !(self.length > 0.0) {
            return Err(bad("length", "must be positive"));
        }
        if self.n_cells < 4 {
            return Err(bad("n_cells", "need at least 4 cells"));
        }
        if !(self.alpha > 0.0) {
            return Err(bad("alpha", "must be positive"));
        }
        if self.mu < 0.0 {
            return Err(bad("mu", "must be nonnegative"));
        }
        if !(self.dt > 0.0) {
            return Err(bad("dt", "must be positive"));
        }
        if self.steps_per_window == 0 {
            return Err(bad("steps_per_window", "must be at least 1"));
        }
        if !(self.kappa > 0.0) || !(self.eta > 0.0) || self.k_smooth == 0 {
            return Err(bad("kappa/eta/k_smooth", "noise cascade parameters invalid"));
        }
        if self.observation_count == 0 {
            return Err(bad("observation_count", "need at least one point"));
        }
        if let Some(extent) = self.observation_extent {
            if !(extent > 0.0 && extent <= self.length) {
                return Err(bad("observation_extent", "must lie in (0, length]"));
            }
        }
        if !(self.sigma > 0.0) {
            return Err(bad("sigma", "must be positive"));
        }
        if self.ess_threshold == 0 || self.ess_threshold > self.n_particles {
            return Err(bad("ess_threshold", "must lie in [1, n_particles]"));
        }
        if !(self.pcn_delta > 0.0 && self.pcn_delta < 2.0) {
            return Err(bad("pcn_delta", "must lie in (0, 2)"));
        }
        if self.n_particles == 0 || self.n_batches == 0 {
            return Err(bad("n_particles/n_batches", "must be positive"));
        }
        if self.n_assim_steps == 0 {
            return Err(bad("n_assim_steps", "must be positive"));
        }
        if !(self.newton_tol > 0.0) || self.newton_max_iters == 0 {
            return Err(bad("newton_tol/newton_max_iters", "invalid Newton settings"));
        }
        Ok(())
    }

    pub fn mesh(&self) -> Result<Mesh, ConfigError> {
        Ok(Mesh::new(self.length, self.n_cells)?)
    }

    pub fn sch_params(&self) -> SchParams {
        SchParams {
            alpha: self.alpha,
            mu: self.mu,
            dt: self.dt,
            steps_per_window: self.steps_per_window,
            newton_tol: self.newton_tol,
            newton_max_iters: self.newton_max_iters,
        }
    }

    pub fn matern_params(&self) -> MaternParams {
        MaternParams {
            kappa: self.kappa,
            eta: self.eta,
            k_smooth: self.k_smooth,
        }
    }

    pub fn obs_config(&self) -> ObsConfig {
        ObsConfig::equispaced(
            self.observation_count,
            self.observation_extent.unwrap_or(self.length),
            self.sigma,
            self.steps_per_window,
        )
    }

    pub fn temper_settings(&self) -> TemperSettings {
        TemperSettings {
            ess_threshold: self.ess_threshold,
            pcn_delta: self.pcn_delta,
            jitter_steps_per_temper: self.jitter_steps,
            max_temper_steps: self.max_temper_steps,
        }
    }

    pub fn nudge_settings(&self) -> NudgeSettings {
        NudgeSettings {
            enabled: self.mode == FilterMode::Nudged,
            max_opt_iters: self.nudge_max_iters,
            gradient_tol: self.nudge_grad_tol,
        }
    }

    pub fn layout(&self) -> Result<EnsembleLayout, ConfigError> {
        Ok(EnsembleLayout::new(self.n_particles, self.n_batches)?)
    }
}
