//! The assembled window model: mesh, operators, timestepper, noise
//! smoother, and observation geometry bundled behind the filtering trait.

use crate::filtering::WindowModel;
use crate::gaussian_field::{MaternParams, MaternSmoother, NoiseError, NoisePath};
use crate::grid::{assemble, FemOperators, GridError, Mesh};
use crate::observing::{log_likelihood, ObsConfig, ObsError, ObsRecord};
use crate::sch_dynamics::{ModelError, ModelState, SchParams, SchStepper};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BuildError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Obs(#[from] ObsError),
}

/// Everything needed to evolve one particle through one assimilation window
/// and weigh it against an observation.
#[derive(Debug, Clone)]
pub struct SchModel {
    mesh: Mesh,
    ops: FemOperators,
    stepper: SchStepper,
    smoother: MaternSmoother,
    obs_cfg: ObsConfig,
}

impl SchModel {
    pub fn new(
        mesh: Mesh,
        sch: SchParams,
        matern: MaternParams,
        obs_cfg: ObsConfig,
    ) -> Result<Self, BuildError> {
        let ops = assemble(&mesh)?;
        obs_cfg.validate(&mesh)?;
        let stepper = SchStepper::new(&ops, sch)?;
        let smoother = MaternSmoother::new(&ops, matern)?;
        Ok(Self {
            mesh,
            ops,
            stepper,
            smoother,
            obs_cfg,
        })
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn ops(&self) -> &FemOperators {
        &self.ops
    }

    pub fn stepper(&self) -> &SchStepper {
        &self.stepper
    }

    pub fn smoother(&self) -> &MaternSmoother {
        &self.smoother
    }

    pub fn obs_config(&self) -> &ObsConfig {
        &self.obs_cfg
    }

    /// Gradient of the log-likelihood with respect to the nodal values of
    /// the final velocity field; the interpolation weights of each
    /// observation point spread its standardised residual over the two
    /// enclosing nodes.
    fn terminal_grad_u(&self, state: &ModelState, obs: &ObsRecord) -> Vec<f64> {
        let n = self.mesh.n_cells();
        let h = self.mesh.cell_width();
        let mut grad = vec![0.0; n];
        for ((&x, &sigma), &y) in self
            .obs_cfg
            .points
            .iter()
            .zip(&self.obs_cfg.sigmas)
            .zip(&obs.values)
        {
            let cell = ((x / h) as usize).min(n - 1);
            let s = (x - cell as f64 * h) / h;
            let right = if cell + 1 == n { 0 } else { cell + 1 };
            let value = state.u.coeffs[cell] * (1.0 - s) + state.u.coeffs[right] * s;
            let factor = -(value - y) / (sigma * sigma);
            grad[cell] += factor * (1.0 - s);
            grad[right] += factor * s;
        }
        grad
    }
}

impl WindowModel for SchModel {
    type State = ModelState;

    fn dt(&self) -> f64 {
        self.stepper.params().dt
    }

    fn n_stages(&self) -> usize {
        self.stepper.params().steps_per_window
    }

    fn n_noise(&self) -> usize {
        self.mesh.n_cells()
    }

    fn evolve_window(
        &self,
        anchor: &ModelState,
        path: &NoisePath,
    ) -> Result<ModelState, ModelError> {
        self.stepper.evolve_window(anchor, path, &self.smoother)
    }

    fn log_likelihood(&self, state: &ModelState, obs: &ObsRecord) -> f64 {
        log_likelihood(state, obs, &self.obs_cfg, &self.mesh)
    }

    fn loglike_lambda_gradient(
        &self,
        anchor: &ModelState,
        path: &NoisePath,
        obs: &ObsRecord,
    ) -> Result<Vec<f64>, ModelError> {
        let states = self
            .stepper
            .evolve_window_states(anchor, path, &self.smoother)?;
        let terminal = self.terminal_grad_u(states.last().expect("nonempty"), obs);
        self.stepper
            .window_lambda_gradient(&states, path, &self.smoother, &terminal)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filtering::log_girsanov_weight;
    use crate::grid::FieldP1;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn small_model(newton_tol: f64) -> SchModel {
        let mesh = Mesh::new(6.4, 16).unwrap();
        let sch = SchParams {
            newton_tol,
            newton_max_iters: 100,
            steps_per_window: 2,
            ..SchParams::default()
        };
        let obs_cfg = ObsConfig::equispaced(9, 6.4, 0.5f64.sqrt(), 2);
        SchModel::new(mesh, sch, MaternParams::default(), obs_cfg).unwrap()
    }

    fn random_instance(
        model: &SchModel,
        seed: u64,
    ) -> (ModelState, NoisePath, ObsRecord) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mesh = model.mesh();
        let u = FieldP1::from_fn(mesh, |x| {
            0.6 + 0.25 * (2.0 * PI * x / mesh.length()).sin()
                + 0.1 * (4.0 * PI * x / mesh.length()).cos()
        });
        let anchor = model.stepper().state_from_velocity(u);
        let mut path = NoisePath::sample(2, 16, model.dt(), &mut rng).unwrap();
        for v in path.lambda.iter_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
        let obs = ObsRecord {
            t_index: 1,
            values: (0..9).map(|_| rng.random_range(0.0..1.2)).collect(),
        };
        (anchor, path, obs)
    }

    #[test]
    fn terminal_gradient_matches_finite_differences() {
        let model = small_model(1e-12);
        let (anchor, _, obs) = random_instance(&model, 1);
        let grad = model.terminal_grad_u(&anchor, &obs);
        let eps = 1e-6;
        for node in [0usize, 5, 15] {
            let mut up = anchor.clone();
            up.u.coeffs[node] += eps;
            let mut dn = anchor.clone();
            dn.u.coeffs[node] -= eps;
            let fd = (model.log_likelihood(&up, &obs) - model.log_likelihood(&dn, &obs))
                / (2.0 * eps);
            assert!(
                (fd - grad[node]).abs() < 1e-7,
                "node {node}: {fd} vs {}",
                grad[node]
            );
        }
    }

    /// Central finite-difference oracle for the adjoint gradient of the
    /// corrected log-weight with respect to every control entry, on N=16,
    /// two steps per window, random states, paths, and controls.
    #[test]
    fn adjoint_gradient_matches_central_finite_differences() {
        let model = small_model(1e-12);
        for seed in [3u64, 4, 5] {
            let (anchor, path, obs) = random_instance(&model, seed);
            let corrected = |p: &NoisePath| -> f64 {
                let state = model.evolve_window(&anchor, p).unwrap();
                model.log_likelihood(&state, &obs) + log_girsanov_weight(p, model.dt())
            };
            let grad_ll = model
                .loglike_lambda_gradient(&anchor, &path, &obs)
                .unwrap();
            let dt = model.dt();
            let mut analytic = vec![0.0; 2 * 16];
            for stage in 0..2 {
                for i in 0..16 {
                    analytic[stage * 16 + i] = grad_ll[stage * 16 + i]
                        - path.lambda_step(stage)[i] * dt
                        - path.dw_step(stage)[i];
                }
            }
            let eps = 1e-5;
            let mut max_rel: f64 = 0.0;
            let mut fd = vec![0.0; 2 * 16];
            for k in 0..2 * 16 {
                let mut pp = path.clone();
                pp.lambda[k] += eps;
                let mut pm = path.clone();
                pm.lambda[k] -= eps;
                fd[k] = (corrected(&pp) - corrected(&pm)) / (2.0 * eps);
            }
            let norm_fd: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
            let diff: f64 = fd
                .iter()
                .zip(&analytic)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            max_rel = max_rel.max(diff / norm_fd.max(1e-12));
            assert!(
                max_rel <= 1e-5,
                "seed {seed}: adjoint/FD relative error {max_rel:.3e}"
            );
        }
    }

    #[test]
    fn evolve_window_through_the_trait_matches_the_stepper() {
        let model = small_model(1e-9);
        let (anchor, path, _) = random_instance(&model, 7);
        let via_trait = model.evolve_window(&anchor, &path).unwrap();
        let direct = model
            .stepper()
            .evolve_window(&anchor, &path, model.smoother())
            .unwrap();
        assert_eq!(via_trait, direct);
    }
}
