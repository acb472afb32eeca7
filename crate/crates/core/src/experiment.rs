//! Experiment orchestration: particle initialization, truth generation,
//! the per-window filter engine, and run output artifacts (config echo,
//! CSV tables, ensemble snapshots, plots).

use crate::config::{ConfigError, FilterMode, RunConfig};
use crate::diagnostics::{self, DiagnosticsError, StepStats};
use crate::ensemble_runtime::{
    for_each_particle, purpose, EnsembleLayout, RandomStream, RuntimeError,
};
use crate::filtering::{
    assimilate_tempered, bootstrap_assimilate, optimize_nudge, FilterError, NudgeSettings,
    Particle, TemperSettings, WindowModel,
};
use crate::gaussian_field::NoisePath;
use crate::grid::{FemOperators, FieldDG0, FieldP1, GridError};
use crate::linalg::CyclicTridiagFactor;
use crate::model::{BuildError, SchModel};
use crate::observing::{synthesize_observation, ObsRecord};
use crate::plot;
use crate::sch_dynamics::{ModelState, SchStepper};
use rand::Rng;
use rand_distr::StandardNormal;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
    #[error(transparent)]
    Model(#[from] crate::sch_dynamics::ModelError),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Draws initial velocity fields: a DG0 white field with cell values
/// N(0, h) pushed through three unit-coefficient elliptic solves of its
/// absolute value, scaled by a squared standard normal, plus a squared
/// standard normal floor. The periodic solves reuse one factorisation.
#[derive(Debug, Clone)]
pub struct Initializer {
    factor: CyclicTridiagFactor,
    ops: FemOperators,
}

impl Initializer {
    pub fn new(ops: &FemOperators) -> Result<Self, GridError> {
        let system = ops.mass().add_scaled(ops.stiffness(), 1.0);
        Ok(Self {
            factor: system.factor()?,
            ops: ops.clone(),
        })
    }

    /// The deterministic part: solve the three-stage cascade on |w| and
    /// assemble u = alpha_sq * U3 + beta_sq.
    pub fn velocity_from_draws(
        &self,
        w: &FieldDG0,
        alpha_sq: f64,
        beta_sq: f64,
    ) -> Result<FieldP1, GridError> {
        let abs = FieldDG0 {
            coeffs: w.coeffs.iter().map(|v| v.abs()).collect(),
        };
        let mut x = self.ops.mixed_load(&abs)?;
        self.factor.solve_in_place(&mut x);
        for _ in 1..3 {
            let mut rhs = self.ops.mass().apply(&x);
            self.factor.solve_in_place(&mut rhs);
            x = rhs;
        }
        Ok(FieldP1 {
            coeffs: x.iter().map(|v| alpha_sq * v + beta_sq).collect(),
        })
    }

    /// One full draw: W, alpha, beta from the stream, momentum via the
    /// discrete Helmholtz relation.
    pub fn sample_state(
        &self,
        stepper: &SchStepper,
        rng: &mut impl Rng,
    ) -> Result<ModelState, GridError> {
        let n = self.ops.n();
        let std = self.ops.cell_width().sqrt();
        let w = FieldDG0 {
            coeffs: (0..n)
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        };
        let alpha: f64 = rng.sample(StandardNormal);
        let beta: f64 = rng.sample(StandardNormal);
        let u = self.velocity_from_draws(&w, alpha * alpha, beta * beta)?;
        Ok(stepper.state_from_velocity(u))
    }
}

/// The hidden signal of one run: its state at every assimilation time and
/// the noisy observations taken from it.
#[derive(Debug, Clone)]
pub struct TruthData {
    /// States at assimilation times 0..=n_steps.
    pub states: Vec<ModelState>,
    /// One observation per assimilation step, t_index = 1..=n_steps.
    pub observations: Vec<ObsRecord>,
}

pub fn generate_truth(
    model: &SchModel,
    init: &Initializer,
    n_steps: usize,
    seed: u64,
) -> Result<TruthData, RunError> {
    let mut init_rng = RandomStream::derive(seed, purpose::TRUTH_INIT, 0, 0);
    let mut states = Vec::with_capacity(n_steps + 1);
    states.push(init.sample_state(model.stepper(), &mut init_rng)?);
    let mut observations = Vec::with_capacity(n_steps);
    let n_cells = model.mesh().n_cells();
    for window in 1..=n_steps {
        let mut evolve_rng = RandomStream::derive(seed, purpose::TRUTH_EVOLVE, 0, window as u64);
        let path = NoisePath::sample(
            model.n_stages(),
            n_cells,
            model.dt(),
            &mut evolve_rng,
        )
        .map_err(crate::sch_dynamics::ModelError::from)?;
        let next = model.evolve_window(states.last().expect("nonempty"), &path)?;
        let mut obs_rng = RandomStream::derive(seed, purpose::OBS_NOISE, 0, window as u64);
        observations.push(synthesize_observation(
            &next,
            model.obs_config(),
            model.mesh(),
            window,
            &mut obs_rng,
        ));
        states.push(next);
    }
    Ok(TruthData {
        states,
        observations,
    })
}

/// Per-assimilation-step trace record.
#[derive(Debug, Clone)]
pub struct WindowTrace {
    pub step: usize,
    pub n_temper: usize,
    pub ess_pre: f64,
    pub ess_post: f64,
    pub theta_schedule: Vec<f64>,
    pub accept_rate: f64,
    pub girsanov_mean: f64,
    pub transfers: usize,
}

/// Drives one ensemble through assimilation windows under a fixed filter
/// mode. The engine owns the model and every derived setting; all
/// randomness is drawn from streams keyed by (seed, purpose, slot, window).
pub struct FilterEngine {
    pub model: SchModel,
    pub layout: EnsembleLayout,
    pub temper: TemperSettings,
    pub nudge: NudgeSettings,
    pub mode: FilterMode,
    pub seed: u64,
}

impl FilterEngine {
    pub fn from_config(config: &RunConfig) -> Result<Self, RunError> {
        config.validate()?;
        let model = SchModel::new(
            config.mesh()?,
            config.sch_params(),
            config.matern_params(),
            config.obs_config(),
        )?;
        Ok(Self {
            model,
            layout: config.layout()?,
            temper: config.temper_settings(),
            nudge: config.nudge_settings(),
            mode: config.mode,
            seed: config.seed,
        })
    }

    /// Fresh ensemble at assimilation time zero.
    pub fn init_ensemble(&self) -> Result<Vec<Particle<ModelState>>, RunError> {
        let init = Initializer::new(self.model.ops())?;
        let n_stages = self.model.n_stages();
        let n_noise = self.model.n_noise();
        let mut ensemble = Vec::with_capacity(self.layout.n_particles);
        for i in 0..self.layout.n_particles {
            let mut rng = RandomStream::derive(self.seed, purpose::INIT, i as u64, 0);
            let state = init.sample_state(self.model.stepper(), &mut rng)?;
            ensemble.push(Particle::new(state, n_stages, n_noise));
        }
        Ok(ensemble)
    }

    /// Advance every particle through one window and assimilate the
    /// observation under the configured mode.
    pub fn run_window(
        &self,
        ensemble: &mut [Particle<ModelState>],
        obs: &ObsRecord,
        window: usize,
    ) -> Result<WindowTrace, RunError> {
        let model = &self.model;
        let n_stages = model.n_stages();
        let n_noise = model.n_noise();
        let dt = model.dt();
        let seed = self.seed;
        let nudge = self.nudge;
        let mode = self.mode;

        // Evolve phase: fresh noise (or optimised controls) per particle.
        for_each_particle(&self.layout, ensemble, |i, particle| {
            particle.anchor = particle.proposed.clone();
            match mode {
                FilterMode::Bootstrap | FilterMode::Tempered => {
                    let mut rng =
                        RandomStream::derive(seed, purpose::EVOLVE, i as u64, window as u64);
                    let path = NoisePath::sample(n_stages, n_noise, dt, &mut rng)
                        .map_err(|e| e.to_string())?;
                    let proposed = model
                        .evolve_window(&particle.anchor, &path)
                        .map_err(|e| e.to_string())?;
                    particle.log_like = model.log_likelihood(&proposed, obs);
                    particle.log_girsanov = 0.0;
                    particle.path = path;
                    particle.proposed = proposed;
                    Ok(())
                }
                FilterMode::Nudged => {
                    let mut rng =
                        RandomStream::derive(seed, purpose::NUDGE, i as u64, window as u64);
                    optimize_nudge(model, particle, obs, &nudge, &mut rng)
                        .map(|_| ())
                        .map_err(|e| e.to_string())
                }
            }
        })?;

        let girsanov_mean = ensemble.iter().map(|p| p.log_girsanov).sum::<f64>()
            / ensemble.len() as f64;
        let mut coord = RandomStream::derive(seed, purpose::COORD, 0, window as u64);

        let trace = match self.mode {
            FilterMode::Bootstrap => {
                let u0: f64 = coord.random();
                let boot = bootstrap_assimilate(ensemble, u0)?;
                WindowTrace {
                    step: window,
                    n_temper: 0,
                    ess_pre: boot.ess_pre,
                    ess_post: ensemble.len() as f64,
                    theta_schedule: vec![1.0],
                    accept_rate: 1.0,
                    girsanov_mean,
                    transfers: boot.transfers,
                }
            }
            FilterMode::Tempered | FilterMode::Nudged => {
                let mut jitter_rngs: Vec<RandomStream> = (0..ensemble.len())
                    .map(|i| RandomStream::derive(seed, purpose::JITTER, i as u64, window as u64))
                    .collect();
                let temper = assimilate_tempered(
                    model,
                    ensemble,
                    obs,
                    &self.temper,
                    &self.layout,
                    &mut coord,
                    &mut jitter_rngs,
                )?;
                WindowTrace {
                    step: window,
                    n_temper: temper.n_temper,
                    ess_pre: temper.min_ess_pre,
                    ess_post: ensemble.len() as f64,
                    theta_schedule: temper.increments,
                    accept_rate: temper.accept_rate,
                    girsanov_mean,
                    transfers: temper.transfers,
                }
            }
        };
        Ok(trace)
    }
}

/// Everything a caller needs to inspect a finished run programmatically.
#[derive(Debug)]
pub struct RunSummary {
    pub stats: Vec<StepStats>,
    pub traces: Vec<WindowTrace>,
    pub out_dir: PathBuf,
}

fn write_observations(path: &Path, truth: &TruthData, points: &[f64]) -> Result<(), RunError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "step,point_index,x,value").map_err(io_err(path))?;
    for obs in &truth.observations {
        for (j, (&x, &v)) in points.iter().zip(&obs.values).enumerate() {
            writeln!(w, "{},{},{},{}", obs.t_index, j, x, v).map_err(io_err(path))?;
        }
    }
    w.flush().map_err(io_err(path))
}

fn write_snapshot(
    dir: &Path,
    step: usize,
    mesh_xs: &[f64],
    truth_u: &FieldP1,
    ensemble: &[Particle<ModelState>],
) -> Result<PathBuf, RunError> {
    let path = dir.join(format!("step_{step:05}.csv"));
    let file = File::create(&path).map_err(io_err(&path))?;
    let mut w = BufWriter::new(file);
    let mut header = String::from("x,truth,mean");
    for i in 0..ensemble.len() {
        header.push_str(&format!(",p{i:03}"));
    }
    writeln!(w, "{header}").map_err(io_err(&path))?;
    let fields: Vec<&FieldP1> = ensemble.iter().map(|p| &p.proposed.u).collect();
    let mean = diagnostics::ensemble_mean(&fields);
    for (i, &x) in mesh_xs.iter().enumerate() {
        let mut row = format!("{x},{},{}", truth_u.coeffs[i], mean.coeffs[i]);
        for f in &fields {
            row.push_str(&format!(",{}", f.coeffs[i]));
        }
        writeln!(w, "{row}").map_err(io_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;
    Ok(path)
}

/// Run one experiment end to end, writing the config echo, observation and
/// diagnostic tables, ensemble snapshots at the configured steps, and the
/// standard plots into `out_dir`. Tables are flushed per step so long runs
/// stay inspectable.
pub fn run_experiment(config: &RunConfig, out_dir: &Path) -> Result<RunSummary, RunError> {
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let snapshots_dir = out_dir.join("snapshots");
    std::fs::create_dir_all(&snapshots_dir).map_err(io_err(&snapshots_dir))?;
    config.save(&out_dir.join("config.toml"))?;

    let engine = FilterEngine::from_config(config)?;
    let init = Initializer::new(engine.model.ops())?;
    let truth = generate_truth(&engine.model, &init, config.n_assim_steps, config.seed)?;
    write_observations(
        &out_dir.join("observations.csv"),
        &truth,
        &engine.model.obs_config().points,
    )?;

    let mesh_xs: Vec<f64> = (0..config.n_cells)
        .map(|i| engine.model.mesh().node_x(i))
        .collect();

    let diag_path = out_dir.join("diagnostics.csv");
    let diag_file = File::create(&diag_path).map_err(io_err(&diag_path))?;
    let mut diag = BufWriter::new(diag_file);
    writeln!(diag, "step,emre,rb,res,ess_pre,n_temper").map_err(io_err(&diag_path))?;

    let trace_path = out_dir.join("filter_trace.csv");
    let trace_file = File::create(&trace_path).map_err(io_err(&trace_path))?;
    let mut trace_w = BufWriter::new(trace_file);
    writeln!(
        trace_w,
        "step,n_temper,ess_pre,ess_post,theta_schedule,accept_rate,girsanov_mean"
    )
    .map_err(io_err(&trace_path))?;

    let mut ensemble = engine.init_ensemble()?;
    let ops = engine.model.ops();

    let step_stats = |step: usize,
                      ensemble: &[Particle<ModelState>],
                      truth_state: &ModelState,
                      ess_pre: f64,
                      n_temper: usize|
     -> Result<StepStats, RunError> {
        let fields: Vec<&FieldP1> = ensemble.iter().map(|p| &p.proposed.u).collect();
        Ok(StepStats {
            step,
            emre: diagnostics::emre(&truth_state.u, &fields, ops)?,
            rb: diagnostics::rb(&truth_state.u, &fields, ops)?,
            res: diagnostics::res(&fields, &truth_state.u, ops)?,
            ess_pre,
            n_temper,
        })
    };

    let mut stats = Vec::with_capacity(config.n_assim_steps + 1);
    let mut traces = Vec::with_capacity(config.n_assim_steps);

    let initial = step_stats(0, &ensemble, &truth.states[0], config.n_particles as f64, 0)?;
    writeln!(
        diag,
        "{},{},{},{},{},{}",
        initial.step, initial.emre, initial.rb, initial.res, initial.ess_pre, initial.n_temper
    )
    .map_err(io_err(&diag_path))?;
    stats.push(initial);

    for window in 1..=config.n_assim_steps {
        let trace = engine.run_window(&mut ensemble, &truth.observations[window - 1], window)?;
        let row = step_stats(
            window,
            &ensemble,
            &truth.states[window],
            trace.ess_pre,
            trace.n_temper,
        )?;
        writeln!(
            diag,
            "{},{},{},{},{},{}",
            row.step, row.emre, row.rb, row.res, row.ess_pre, row.n_temper
        )
        .map_err(io_err(&diag_path))?;
        diag.flush().map_err(io_err(&diag_path))?;

        let schedule = trace
            .theta_schedule
            .iter()
            .map(|d| format!("{d:.6}"))
            .collect::<Vec<_>>()
            .join(";");
        writeln!(
            trace_w,
            "{},{},{},{},{},{},{}",
            trace.step,
            trace.n_temper,
            trace.ess_pre,
            trace.ess_post,
            schedule,
            trace.accept_rate,
            trace.girsanov_mean
        )
        .map_err(io_err(&trace_path))?;
        trace_w.flush().map_err(io_err(&trace_path))?;

        if config.snapshot_steps.contains(&window) {
            write_snapshot(
                &snapshots_dir,
                window,
                &mesh_xs,
                &truth.states[window].u,
                &ensemble,
            )?;
        }
        stats.push(row);
        traces.push(trace);
    }

    plot::render_run_dir(out_dir).map_err(io_err(out_dir))?;

    Ok(RunSummary {
        stats,
        traces,
        out_dir: out_dir.to_path_buf(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::assemble;
    use crate::sch_dynamics::SchParams;
    use approx::assert_relative_eq;

    fn ops100() -> (crate::grid::Mesh, FemOperators) {
        let mesh = crate::grid::Mesh::new(40.0, 100).unwrap();
        let ops = assemble(&mesh).unwrap();
        (mesh, ops)
    }

    #[test]
    fn initial_velocity_with_zero_scale_is_the_constant_floor() {
        let (_, ops) = ops100();
        let init = Initializer::new(&ops).unwrap();
        let w = FieldDG0 {
            coeffs: (0..100).map(|i| (i as f64 * 0.17).sin()).collect(),
        };
        let beta_sq = 1.9;
        let u = init.velocity_from_draws(&w, 0.0, beta_sq).unwrap();
        for v in &u.coeffs {
            assert_relative_eq!(*v, beta_sq, epsilon = 1e-12);
        }
    }

    #[test]
    fn initial_velocity_is_nonnegative_over_many_draws() {
        // Empirical positivity scan: the elliptic cascade of |W| stays
        // nonnegative on this mesh, so alpha^2 U + beta^2 >= 0 at nodes.
        let (_, ops) = ops100();
        let init = Initializer::new(&ops).unwrap();
        let stepper = SchStepper::new(&ops, SchParams::default()).unwrap();
        let mut min_seen = f64::INFINITY;
        for i in 0..1000 {
            let mut rng = RandomStream::derive(11, purpose::INIT, i, 0);
            let state = init.sample_state(&stepper, &mut rng).unwrap();
            for v in &state.u.coeffs {
                min_seen = min_seen.min(*v);
            }
        }
        assert!(min_seen >= 0.0, "negative initial velocity {min_seen}");
    }

    #[test]
    fn initial_state_satisfies_the_helmholtz_relation() {
        let (_, ops) = ops100();
        let init = Initializer::new(&ops).unwrap();
        let stepper = SchStepper::new(&ops, SchParams::default()).unwrap();
        let mut rng = RandomStream::derive(5, purpose::INIT, 3, 0);
        let state = init.sample_state(&stepper, &mut rng).unwrap();
        let back = stepper.velocity_from_momentum(&state.m);
        for (a, b) in back.coeffs.iter().zip(&state.u.coeffs) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn window_failure_names_the_offending_particle() {
        let mut config = RunConfig::default();
        config.n_cells = 32;
        config.length = 12.8;
        config.observation_count = 9;
        config.n_particles = 8;
        config.ess_threshold = 5;
        let engine = FilterEngine::from_config(&config).unwrap();
        let mut ensemble = engine.init_ensemble().unwrap();
        for v in ensemble[5].proposed.m.coeffs.iter_mut() {
            *v = 1e154;
        }
        let obs = ObsRecord {
            t_index: 1,
            values: vec![0.0; 9],
        };
        match engine.run_window(&mut ensemble, &obs, 1) {
            Err(RunError::Runtime(RuntimeError::Particle { particle, message })) => {
                assert_eq!(particle, 5);
                assert!(!message.is_empty());
            }
            other => panic!("expected a particle-tagged failure, got {other:?}"),
        }
    }

    #[test]
    fn truth_replays_bitwise_and_counts_observations() {
        let mut config = RunConfig::default();
        config.n_cells = 32;
        config.length = 12.8;
        config.observation_count = 9;
        config.n_assim_steps = 4;
        config.n_particles = 4;
        config.ess_threshold = 3;
        let engine = FilterEngine::from_config(&config).unwrap();
        let init = Initializer::new(engine.model.ops()).unwrap();
        let a = generate_truth(&engine.model, &init, 4, config.seed).unwrap();
        let b = generate_truth(&engine.model, &init, 4, config.seed).unwrap();
        assert_eq!(a.observations.len(), 4);
        assert_eq!(a.states.len(), 5);
        for (sa, sb) in a.states.iter().zip(&b.states) {
            assert_eq!(sa, sb);
        }
        for (oa, ob) in a.observations.iter().zip(&b.observations) {
            assert_eq!(oa, ob);
        }
        // Different seed, different truth.
        let c = generate_truth(&engine.model, &init, 4, config.seed + 1).unwrap();
        assert_ne!(a.states[1], c.states[1]);
    }
}
