//! Point observations of the velocity field: the observation operator,
//! synthetic data generation, Gaussian log-likelihoods, and the effective
//! sample size.
//!
//! Likelihood sums stay in log space throughout; weights are exponentiated
//! only inside max-subtracted softmax normalisation, since 81 squared
//! residuals underflow raw exponentials.

use crate::grid::{eval_at, GridError, Mesh};
use crate::sch_dynamics::ModelState;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ObsError {
    #[error("observation points must be strictly increasing within [0, L)")]
    BadPoints,
    #[error("observation noise std must be positive")]
    BadSigma,
    #[error("need one sigma per observation point: {points} points, {sigmas} sigmas")]
    SigmaCount { points: usize, sigmas: usize },
    #[error("all log-weights are -inf; the ensemble is fully degenerate")]
    AllWeightsZero,
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Where and how the velocity is observed.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsConfig {
    /// Observation coordinates, strictly increasing within [0, L).
    pub points: Vec<f64>,
    /// Per-point noise standard deviations.
    pub sigmas: Vec<f64>,
    /// Model steps between consecutive observations (N_s).
    pub steps_between_obs: usize,
}

impl ObsConfig {
    /// M equispaced points x_j = j * extent / M, j = 0..M-1 (periodic grid,
    /// no duplicated endpoint), one shared sigma.
    pub fn equispaced(count: usize, extent: f64, sigma: f64, steps_between_obs: usize) -> Self {
        let points = (0..count)
            .map(|j| j as f64 * extent / count as f64)
            .collect();
        Self {
            points,
            sigmas: vec![sigma; count],
            steps_between_obs,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self, mesh: &Mesh) -> Result<(), ObsError> {
        if self.sigmas.len() != self.points.len() {
            return Err(ObsError::SigmaCount {
                points: self.points.len(),
                sigmas: self.sigmas.len(),
            });
        }
        if self.sigmas.iter().any(|&s| !(s > 0.0)) {
            return Err(ObsError::BadSigma);
        }
        let in_domain = self
            .points
            .iter()
            .all(|&x| x >= 0.0 && x < mesh.length() && x.is_finite());
        let increasing = self.points.windows(2).all(|w| w[0] < w[1]);
        if !in_domain || !increasing || self.points.is_empty() {
            return Err(ObsError::BadPoints);
        }
        Ok(())
    }
}

/// One observation vector, indexed by assimilation step.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsRecord {
    pub t_index: usize,
    pub values: Vec<f64>,
}

/// Noise-free projection of the velocity onto the observation grid.
pub fn observe(state: &ModelState, cfg: &ObsConfig, mesh: &Mesh) -> Vec<f64> {
    cfg.points
        .iter()
        .map(|&x| eval_at(&state.u, x, mesh).expect("validated observation point"))
        .collect()
}

/// Projection of the truth plus iid Gaussian noise with the configured
/// per-point variances.
pub fn synthesize_observation(
    truth: &ModelState,
    cfg: &ObsConfig,
    mesh: &Mesh,
    t_index: usize,
    rng: &mut impl Rng,
) -> ObsRecord {
    let values = observe(truth, cfg, mesh)
        .into_iter()
        .zip(&cfg.sigmas)
        .map(|(v, &s)| v + s * rng.sample::<f64, _>(StandardNormal))
        .collect();
    ObsRecord { t_index, values }
}

/// Gaussian log-likelihood -1/2 sum_j ((G(u)_j - Y_j)/sigma_j)^2; the
/// likelihood weight is exp of this.
pub fn log_likelihood(state: &ModelState, obs: &ObsRecord, cfg: &ObsConfig, mesh: &Mesh) -> f64 {
    debug_assert_eq!(obs.values.len(), cfg.points.len());
    let mut acc = 0.0;
    for ((&x, &sigma), &y) in cfg.points.iter().zip(&cfg.sigmas).zip(&obs.values) {
        let v = eval_at(&state.u, x, mesh).expect("validated observation point");
        let r = (v - y) / sigma;
        acc += r * r;
    }
    -0.5 * acc
}

/// Max-subtracted softmax of log-weights.
pub fn normalized_weights(log_weights: &[f64]) -> Result<Vec<f64>, ObsError> {
    let max = log_weights
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(ObsError::AllWeightsZero);
    }
    let mut w: Vec<f64> = log_weights.iter().map(|&lw| (lw - max).exp()).collect();
    let sum: f64 = w.iter().sum();
    for v in w.iter_mut() {
        *v /= sum;
    }
    Ok(w)
}

/// Effective sample size 1/sum(w_bar^2) of the softmax-normalised weights;
/// ranges from 1 (one dominant weight) to N_p (uniform weights).
pub fn ess(log_weights: &[f64]) -> Result<f64, ObsError> {
    let w = normalized_weights(log_weights)?;
    let sumsq: f64 = w.iter().map(|v| v * v).sum();
    Ok(1.0 / sumsq)
}
