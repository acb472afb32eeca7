//! The particle-filter stack: bootstrap resampling, adaptive tempering,
//! PCN jittering on the Brownian-increment representation, and Girsanov
//! nudging with incremental control optimisation.
//!
//! Everything here is generic over a [`WindowModel`], the map from (state
//! at the previous assimilation time, noise path over the window) to the
//! state at the next one. Tests exercise the machinery on small analytic
//! surrogates; the production model lives in [`crate::model`].

mod lbfgs;

pub use lbfgs::{LbfgsOptions, LbfgsResult};

use crate::ensemble_runtime::{
    exchange_resample, for_each_particle2, EnsembleLayout, RandomStream, RuntimeError,
};
use crate::gaussian_field::NoisePath;
use crate::observing::{ess, normalized_weights, ObsError, ObsRecord};
use crate::sch_dynamics::ModelError;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

/// Bisection tolerance on tempering increments.
const TEMPER_BISECT_TOL: f64 = 1e-3;
/// Smallest admissible tempering increment before declaring degeneracy.
const TEMPER_MIN_INCREMENT: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("weights must be nonnegative and sum to 1 within 1e-12 (sum was {0})")]
    NotNormalised(f64),
    #[error("pcn delta must lie in [0, 2), got {0}")]
    BadDelta(f64),
    #[error(
        "tempering degenerate at theta={theta_done:.4}: ESS {ess_at_min:.2} below threshold \
         {threshold} even at increment {min_increment:e}"
    )]
    Degenerate {
        theta_done: f64,
        ess_at_min: f64,
        threshold: f64,
        min_increment: f64,
    },
    #[error("exceeded {0} tempering steps")]
    MaxTemperSteps(usize),
    #[error("ess threshold {threshold} exceeds ensemble size {n}")]
    BadThreshold { threshold: f64, n: usize },
    #[error(transparent)]
    Weights(#[from] ObsError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One window of model evolution, as the filter sees it.
pub trait WindowModel: Sync {
    type State: Clone + Send + Sync;

    /// Model time step (the prior variance of every noise entry).
    fn dt(&self) -> f64;
    /// Model steps per assimilation window.
    fn n_stages(&self) -> usize;
    /// Noise dimension per step.
    fn n_noise(&self) -> usize;
    /// Deterministic propagation of an anchor state through the window
    /// under a given noise path.
    fn evolve_window(&self, anchor: &Self::State, path: &NoisePath)
        -> Result<Self::State, ModelError>;
    fn log_likelihood(&self, state: &Self::State, obs: &ObsRecord) -> f64;
    /// Gradient of `log_likelihood(evolve_window(anchor, path), obs)` with
    /// respect to every control entry (flat stages x noise), excluding the
    /// Girsanov part.
    fn loglike_lambda_gradient(
        &self,
        anchor: &Self::State,
        path: &NoisePath,
        obs: &ObsRecord,
    ) -> Result<Vec<f64>, ModelError>;
}

/// A particle is the pair (state at the previous assimilation time, noise
/// path over the window), together with the proposed end-of-window state
/// and its cached weight parts.
#[derive(Debug, Clone)]
pub struct Particle<S> {
    pub anchor: S,
    pub path: NoisePath,
    pub proposed: S,
    pub log_like: f64,
    pub log_girsanov: f64,
}

impl<S: Clone> Particle<S> {
    pub fn new(anchor: S, n_stages: usize, n_noise: usize) -> Self {
        let proposed = anchor.clone();
        Self {
            anchor,
            path: NoisePath::zeros(n_stages, n_noise),
            proposed,
            log_like: 0.0,
            log_girsanov: 0.0,
        }
    }

    /// Girsanov-corrected log-weight.
    pub fn corrected_log_weight(&self) -> f64 {
        self.log_like + self.log_girsanov
    }
}

/// Settings for adaptive tempering with PCN jittering.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemperSettings {
    /// ESS threshold N_p* each tempering step must keep.
    pub ess_threshold: usize,
    /// PCN step parameter, in (0, 2).
    pub pcn_delta: f64,
    pub jitter_steps_per_temper: usize,
    pub max_temper_steps: usize,
}

impl Default for TemperSettings {
    fn default() -> Self {
        Self {
            ess_threshold: 80,
            pcn_delta: 0.15,
            jitter_steps_per_temper: 5,
            max_temper_steps: 100,
        }
    }
}

/// Settings for the incremental nudging optimiser.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NudgeSettings {
    pub enabled: bool,
    pub max_opt_iters: usize,
    pub gradient_tol: f64,
}

impl Default for NudgeSettings {
    fn default() -> Self {
        Self {
            enabled: false,
            max_opt_iters: 20,
            gradient_tol: 1e-6,
        }
    }
}

/// Systematic resampling with a single stratified offset u0 in [0, 1):
/// threshold (u0 + j)/N against the cumulative weights. Each particle is
/// selected floor(N w_i) or floor(N w_i)+1 times.
pub fn systematic_resample(weights: &[f64], u0: f64) -> Result<Vec<usize>, FilterError> {
    let n = weights.len();
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-12 || weights.iter().any(|&w| w < -1e-15) {
        return Err(FilterError::NotNormalised(sum));
    }
    debug_assert!((0.0..1.0).contains(&u0));
    let mut ancestors = Vec::with_capacity(n);
    let mut cum = weights[0];
    let mut i = 0;
    for j in 0..n {
        let threshold = (u0 + j as f64) / n as f64;
        // Particle i owns [cum_{i-1}, cum_i); a threshold on the boundary
        // belongs to the next particle.
        while cum <= threshold && i + 1 < n {
            i += 1;
            cum += weights[i];
        }
        ancestors.push(i);
    }
    Ok(ancestors)
}

/// Largest tempering increment that keeps ESS at or above the threshold,
/// found by bisection to 1e-3; returns the full remainder when even that
/// keeps the ESS healthy. ESS is monotone non-increasing in the increment,
/// which makes the bisection valid.
pub fn adapt_temper_increment(
    log_likes: &[f64],
    theta_done: f64,
    ess_threshold: f64,
) -> Result<f64, FilterError> {
    debug_assert!((0.0..1.0).contains(&theta_done));
    let remaining = 1.0 - theta_done;
    let ess_at = |dtheta: f64| -> Result<f64, FilterError> {
        let scaled: Vec<f64> = log_likes.iter().map(|&l| dtheta * l).collect();
        Ok(ess(&scaled)?)
    };
    if remaining <= TEMPER_MIN_INCREMENT || ess_at(remaining)? >= ess_threshold {
        return Ok(remaining);
    }
    let ess_at_min = ess_at(TEMPER_MIN_INCREMENT)?;
    if ess_at_min < ess_threshold {
        return Err(FilterError::Degenerate {
            theta_done,
            ess_at_min,
            threshold: ess_threshold,
            min_increment: TEMPER_MIN_INCREMENT,
        });
    }
    let mut lo = TEMPER_MIN_INCREMENT;
    let mut hi = remaining;
    while hi - lo > TEMPER_BISECT_TOL {
        let mid = 0.5 * (lo + hi);
        if ess_at(mid)? >= ess_threshold {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// PCN proposal dW -> (2-d)/(2+d) dW + sqrt(8d)/(2+d) dW_fresh with fresh
/// iid N(0, dt) entries; the control is untouched. The map preserves the
/// N(0, dt) prior exactly since the two coefficients square-sum to one.
pub fn pcn_propose(
    path: &NoisePath,
    delta: f64,
    dt: f64,
    rng: &mut impl Rng,
) -> Result<NoisePath, FilterError> {
    if !(0.0..2.0).contains(&delta) {
        return Err(FilterError::BadDelta(delta));
    }
    let keep = (2.0 - delta) / (2.0 + delta);
    let fresh = (8.0 * delta).sqrt() / (2.0 + delta);
    let std = dt.sqrt();
    let mut out = path.clone();
    for v in out.dw.iter_mut() {
        *v = keep * *v + fresh * std * rng.sample::<f64, _>(StandardNormal);
    }
    Ok(out)
}

/// Log of the discrete Girsanov density for a controlled path:
/// -sum_n sum_i (1/2 lambda^2 dt + lambda dW). On the uniform mesh the DG0
/// inner products against 1/A reduce to unit weight per cell, so this is a
/// plain sum over the stored raw coordinates. The corrected particle
/// log-weight is log_like + this value; it is zero whenever the control is.
pub fn log_girsanov_weight(path: &NoisePath, dt: f64) -> f64 {
    if !path.has_control() {
        return 0.0;
    }
    let mut acc = 0.0;
    for (l, w) in path.lambda.iter().zip(&path.dw) {
        acc += 0.5 * l * l * dt + l * w;
    }
    -acc
}

/// One PCN Metropolis step on the theta-tempered posterior over the noise
/// path, anchor fixed. Accepts with probability
/// min(1, exp(theta (l_new - l_old))) where l is the corrected log-weight.
/// A step failure in the proposal rejects it with a logged warning.
pub fn jitter_once<M: WindowModel>(
    model: &M,
    particle: &mut Particle<M::State>,
    theta: f64,
    obs: &ObsRecord,
    delta: f64,
    rng: &mut impl Rng,
) -> Result<bool, FilterError> {
    let proposal = pcn_propose(&particle.path, delta, model.dt(), rng)?;
    let state = match model.evolve_window(&particle.anchor, &proposal) {
        Ok(s) => s,
        Err(e) => {
            log::warn!("jitter proposal rejected after step failure: {e}");
            rng.random::<f64>(); // keep the draw count schedule fixed
            return Ok(false);
        }
    };
    let log_like = model.log_likelihood(&state, obs);
    let log_girsanov = log_girsanov_weight(&proposal, model.dt());
    let log_ratio = theta * (log_like + log_girsanov - particle.corrected_log_weight());
    let u: f64 = rng.random();
    let accept = u.ln() < log_ratio;
    if accept {
        particle.path = proposal;
        particle.proposed = state;
        particle.log_like = log_like;
        particle.log_girsanov = log_girsanov;
    }
    Ok(accept)
}

/// Trace of one bootstrap assimilation.
#[derive(Debug, Clone)]
pub struct BootstrapTrace {
    pub ess_pre: f64,
    pub transfers: usize,
}

/// Weight by the corrected log-likelihoods, resample once systematically,
/// and reset to equal weights.
pub fn bootstrap_assimilate<S: Clone>(
    ensemble: &mut [Particle<S>],
    u0: f64,
) -> Result<BootstrapTrace, FilterError> {
    let log_weights: Vec<f64> = ensemble.iter().map(|p| p.corrected_log_weight()).collect();
    let ess_pre = ess(&log_weights)?;
    let weights = normalized_weights(&log_weights)?;
    let ancestors = systematic_resample(&weights, u0)?;
    let transfers = exchange_resample(ensemble, &ancestors)?;
    Ok(BootstrapTrace { ess_pre, transfers })
}

/// Trace of one tempered assimilation.
#[derive(Debug, Clone)]
pub struct TemperTrace {
    pub n_temper: usize,
    pub increments: Vec<f64>,
    /// Minimum pre-resampling ESS across the tempering steps.
    pub min_ess_pre: f64,
    pub accept_rate: f64,
    pub transfers: usize,
}

/// Adaptive tempering with jittering: pick the largest increment keeping
/// ESS above threshold, resample, jitter every particle at the accumulated
/// temperature, and repeat until the increments sum to exactly one.
pub fn assimilate_tempered<M: WindowModel>(
    model: &M,
    ensemble: &mut [Particle<M::State>],
    obs: &ObsRecord,
    settings: &TemperSettings,
    layout: &EnsembleLayout,
    coord_rng: &mut RandomStream,
    jitter_rngs: &mut [RandomStream],
) -> Result<TemperTrace, FilterError> {
    let n = ensemble.len();
    let threshold = settings.ess_threshold as f64;
    if threshold > n as f64 {
        return Err(FilterError::BadThreshold { threshold, n });
    }
    if !(0.0..2.0).contains(&settings.pcn_delta) {
        return Err(FilterError::BadDelta(settings.pcn_delta));
    }

    let mut theta = 0.0;
    let mut increments: Vec<f64> = Vec::new();
    let mut min_ess_pre = f64::INFINITY;
    let mut transfers = 0;
    let mut accepts = 0usize;
    let mut proposals = 0usize;

    loop {
        if increments.len() >= settings.max_temper_steps {
            return Err(FilterError::MaxTemperSteps(settings.max_temper_steps));
        }
        let log_weights: Vec<f64> = ensemble.iter().map(|p| p.corrected_log_weight()).collect();
        let dtheta = adapt_temper_increment(&log_weights, theta, threshold)?;
        let is_final = dtheta >= 1.0 - theta - f64::EPSILON;

        let scaled: Vec<f64> = log_weights.iter().map(|&l| dtheta * l).collect();
        min_ess_pre = min_ess_pre.min(ess(&scaled)?);
        let weights = normalized_weights(&scaled)?;
        let u0: f64 = coord_rng.random();
        let ancestors = systematic_resample(&weights, u0)?;
        transfers += exchange_resample(ensemble, &ancestors)?;

        theta = if is_final { 1.0 } else { theta + dtheta };
        increments.push(dtheta);

        let jitter_steps = settings.jitter_steps_per_temper;
        let delta = settings.pcn_delta;
        let batch_accepts = std::sync::atomic::AtomicUsize::new(0);
        for_each_particle2(layout, ensemble, jitter_rngs, |_, particle, rng| {
            let mut local = 0;
            for _ in 0..jitter_steps {
                match jitter_once(model, particle, theta, obs, delta, rng) {
                    Ok(true) => local += 1,
                    Ok(false) => {}
                    Err(e) => return Err(e.to_string()),
                }
            }
            batch_accepts.fetch_add(local, std::sync::atomic::Ordering::Relaxed);
            Ok(())
        })?;
        accepts += batch_accepts.load(std::sync::atomic::Ordering::Relaxed);
        proposals += jitter_steps * n;

        if is_final {
            break;
        }
    }

    Ok(TemperTrace {
        n_temper: increments.len(),
        increments,
        min_ess_pre,
        accept_rate: if proposals == 0 {
            1.0
        } else {
            accepts as f64 / proposals as f64
        },
        transfers,
    })
}

/// Trace of one nudging optimisation.
#[derive(Debug, Clone, Default)]
pub struct NudgeTrace {
    pub total_iterations: usize,
    pub stages_failed: usize,
}

/// Incremental nudging: for each stage in order, maximise the corrected
/// log-weight over that stage's control with every other stage fixed, then
/// reveal that stage's Brownian increment. The control is therefore always
/// adapted to past noise only. With nudging disabled this is the identity.
pub fn optimize_nudge<M: WindowModel>(
    model: &M,
    particle: &mut Particle<M::State>,
    obs: &ObsRecord,
    settings: &NudgeSettings,
    rng: &mut impl Rng,
) -> Result<NudgeTrace, ModelError> {
    if !settings.enabled {
        return Ok(NudgeTrace::default());
    }
    let n_stages = model.n_stages();
    let n_noise = model.n_noise();
    let dt = model.dt();
    let std = dt.sqrt();
    let opts = LbfgsOptions {
        max_iters: settings.max_opt_iters,
        grad_tol: settings.gradient_tol,
        memory: 5,
    };

    let mut path = NoisePath::zeros(n_stages, n_noise);
    let mut trace = NudgeTrace::default();

    for stage in 0..n_stages {
        let anchor = particle.anchor.clone();
        let base_path = path.clone();
        let objective = |lambda: &[f64]| -> Option<(f64, Vec<f64>)> {
            let mut candidate = base_path.clone();
            candidate.lambda_step_mut(stage).copy_from_slice(lambda);
            let state = model.evolve_window(&anchor, &candidate).ok()?;
            let value =
                model.log_likelihood(&state, obs) + log_girsanov_weight(&candidate, dt);
            let grad_ll = model
                .loglike_lambda_gradient(&anchor, &candidate, obs)
                .ok()?;
            let dw = candidate.dw_step(stage);
            let grad: Vec<f64> = (0..n_noise)
                .map(|i| -(grad_ll[stage * n_noise + i] - lambda[i] * dt - dw[i]))
                .collect();
            Some((-value, grad))
        };
        match lbfgs::minimize(vec![0.0; n_noise], &opts, objective) {
            Ok(result) => {
                trace.total_iterations += result.iterations;
                path.lambda_step_mut(stage).copy_from_slice(&result.x);
            }
            Err(e) => {
                log::warn!("nudge optimiser failed at stage {stage}: {e}; keeping zero control");
                trace.stages_failed += 1;
            }
        }
        for v in path.dw_step_mut(stage) {
            *v = std * rng.sample::<f64, _>(StandardNormal);
        }
    }

    particle.proposed = model.evolve_window(&particle.anchor, &path)?;
    particle.log_like = model.log_likelihood(&particle.proposed, obs);
    particle.log_girsanov = log_girsanov_weight(&path, dt);
    particle.path = path;
    Ok(trace)
}
