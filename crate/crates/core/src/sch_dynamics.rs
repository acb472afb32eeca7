//! The spatially discrete viscous Camassa-Holm model with transport noise
//! and its Stratonovich midpoint timestepper.
//!
//! Unknowns are the momentum/velocity pair (m, u). Each step solves the
//! coupled nonlinear system
//!
//! ```text
//!   (m' - m, phi) + mu dt (dx m_half, dx phi)
//!       + (m_half dx v_half, phi) - (m_half v_half, dx phi) = 0
//!   (u', psi) + alpha^2 (dx u', dx psi) - (m', psi) = 0
//! ```
//!
//! with m_half = (m' + m)/2, v_half = dt u_half + dU, by a damped Newton
//! iteration with an analytically assembled Jacobian. The Jacobian transpose
//! drives the adjoint sweep used by the nudging gradient.

use crate::gaussian_field::{MaternSmoother, NoiseError, NoisePath};
use crate::grid::{FemOperators, FieldP1, GridError};
use crate::linalg::{BlockCyclicTridiag, CyclicTridiag, CyclicTridiagFactor, LinalgError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("newton iteration stalled after {iterations} iterations, residual {residual:.3e}")]
    NewtonDiverged { iterations: usize, residual: f64 },
    #[error("state or residual became non-finite during a step")]
    NonFinite,
    #[error(transparent)]
    Solver(#[from] LinalgError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
}

/// Physical and numerical parameters of the timestepper.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchParams {
    /// Helmholtz length scale in m = u - alpha^2 u_xx.
    pub alpha: f64,
    /// Viscosity.
    pub mu: f64,
    /// Model time step.
    pub dt: f64,
    /// Model steps per assimilation window.
    pub steps_per_window: usize,
    pub newton_tol: f64,
    pub newton_max_iters: usize,
}

impl Default for SchParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            mu: 0.01,
            dt: 0.025,
            steps_per_window: 5,
            newton_tol: 1e-9,
            newton_max_iters: 50,
        }
    }
}

impl SchParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        let ok = self.alpha > 0.0
            && self.mu >= 0.0
            && self.dt > 0.0
            && self.steps_per_window >= 1
            && self.newton_tol > 0.0
            && self.newton_max_iters >= 1;
        if ok {
            Ok(())
        } else {
            Err(ModelError::NonFinite)
        }
    }
}

/// Momentum/velocity pair at one time level. The two fields satisfy the
/// discrete Helmholtz relation (u, psi) + alpha^2 (dx u, dx psi) = (m, psi)
/// up to solver tolerance.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub m: FieldP1,
    pub u: FieldP1,
}

impl ModelState {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: FieldP1::zeros(n),
            u: FieldP1::zeros(n),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.m.coeffs.iter().all(|v| v.is_finite()) && self.u.coeffs.iter().all(|v| v.is_finite())
    }
}

/// Timestepper with the time-independent matrices factorised once.
#[derive(Debug, Clone)]
pub struct SchStepper {
    params: SchParams,
    ops: FemOperators,
    helmholtz: CyclicTridiag,
    helmholtz_factor: CyclicTridiagFactor,
}

impl SchStepper {
    pub fn new(ops: &FemOperators, params: SchParams) -> Result<Self, ModelError> {
        params.validate()?;
        let helmholtz = ops
            .mass()
            .add_scaled(ops.stiffness(), params.alpha * params.alpha);
        let helmholtz_factor = helmholtz.factor()?;
        Ok(Self {
            params,
            ops: ops.clone(),
            helmholtz,
            helmholtz_factor,
        })
    }

    pub fn params(&self) -> &SchParams {
        &self.params
    }

    pub fn ops(&self) -> &FemOperators {
        &self.ops
    }

    pub fn n(&self) -> usize {
        self.ops.n()
    }

    /// u = (M + alpha^2 K)^{-1} M m.
    pub fn velocity_from_momentum(&self, m: &FieldP1) -> FieldP1 {
        let mut rhs = self.ops.mass().apply(&m.coeffs);
        self.helmholtz_factor.solve_in_place(&mut rhs);
        FieldP1 { coeffs: rhs }
    }

    /// m = M^{-1} (M + alpha^2 K) u, the weak form of m = u - alpha^2 u_xx.
    pub fn momentum_from_velocity(&self, u: &FieldP1) -> FieldP1 {
        let mut rhs = self.helmholtz.apply(&u.coeffs);
        self.ops.mass_factor().solve_in_place(&mut rhs);
        FieldP1 { coeffs: rhs }
    }

    pub fn state_from_velocity(&self, u: FieldP1) -> ModelState {
        let m = self.momentum_from_velocity(&u);
        ModelState { m, u }
    }

    /// Residual of the coupled midpoint system at the iterate (m, u), given
    /// the previous level and the smoothed noise increment.
    fn residual(
        &self,
        prev: &ModelState,
        m: &[f64],
        u: &[f64],
        du: &[f64],
        out_m: &mut Vec<f64>,
        out_u: &mut Vec<f64>,
    ) {
        let n = self.ops.n();
        let dt = self.params.dt;
        let mu_dt = self.params.mu * dt;

        let mbar: Vec<f64> = m
            .iter()
            .zip(&prev.m.coeffs)
            .map(|(a, b)| 0.5 * (a + b))
            .collect();
        let dv: Vec<f64> = u
            .iter()
            .zip(&prev.u.coeffs)
            .zip(du)
            .map(|((un, up), d)| dt * 0.5 * (un + up) + d)
            .collect();

        // Momentum row: M (m - m_prev) + mu dt K mbar + T(mbar, dv).
        let diff: Vec<f64> = m
            .iter()
            .zip(&prev.m.coeffs)
            .map(|(a, b)| a - b)
            .collect();
        out_m.clear();
        out_m.resize(n, 0.0);
        self.ops.mass().matvec(&diff, out_m);
        let k_mbar = self.ops.stiffness().apply(&mbar);
        for i in 0..n {
            out_m[i] += mu_dt * k_mbar[i];
        }
        transport_residual(&mbar, &dv, out_m);

        // Helmholtz row: H u - M m.
        out_u.clear();
        out_u.resize(n, 0.0);
        self.helmholtz.matvec(u, out_u);
        let mm = self.ops.mass().apply(m);
        for i in 0..n {
            out_u[i] -= mm[i];
        }
    }

    /// Dual (M^{-1}-weighted) norm of the stacked residual.
    fn residual_norm(&self, rm: &[f64], ru: &[f64]) -> f64 {
        let sm = self.ops.mass_factor().solve(rm);
        let su = self.ops.mass_factor().solve(ru);
        let a: f64 = rm.iter().zip(&sm).map(|(x, y)| x * y).sum();
        let b: f64 = ru.iter().zip(&su).map(|(x, y)| x * y).sum();
        (a + b).max(0.0).sqrt()
    }

    /// Jacobian of the residual with respect to (m, u) at the iterate, as a
    /// cyclic block-tridiagonal matrix of 2x2 blocks.
    fn jacobian(&self, prev: &ModelState, m: &[f64], u: &[f64], du: &[f64]) -> BlockCyclicTridiag {
        let dt = self.params.dt;
        let mbar: Vec<f64> = m
            .iter()
            .zip(&prev.m.coeffs)
            .map(|(a, b)| 0.5 * (a + b))
            .collect();
        let dv: Vec<f64> = u
            .iter()
            .zip(&prev.u.coeffs)
            .zip(du)
            .map(|((un, up), d)| dt * 0.5 * (un + up) + d)
            .collect();
        let (a_mat, b_mat) = transport_jacobians(&mbar, &dv);

        let j_mm = self
            .ops
            .mass()
            .add_scaled(self.ops.stiffness(), 0.5 * self.params.mu * dt)
            .add_scaled(&a_mat, 0.5);
        let j_mu = b_mat.scale(0.5 * dt);
        let j_um = self.ops.mass().scale(-1.0);
        BlockCyclicTridiag::from_components(&j_mm, &j_mu, &j_um, &self.helmholtz)
    }

    /// One implicit midpoint step driven by the smoothed increment `du`
    /// (zero field for deterministic runs).
    pub fn step(&self, state: &ModelState, du: &FieldP1) -> Result<ModelState, ModelError> {
        let n = self.ops.n();
        let tol = self.params.newton_tol;
        let mut m = state.m.coeffs.clone();
        let mut u = state.u.coeffs.clone();
        let mut rm = Vec::with_capacity(n);
        let mut ru = Vec::with_capacity(n);
        self.residual(state, &m, &u, &du.coeffs, &mut rm, &mut ru);
        let mut norm = self.residual_norm(&rm, &ru);

        for iter in 0..self.params.newton_max_iters {
            if !norm.is_finite() {
                return Err(ModelError::NonFinite);
            }
            if norm <= tol {
                return Ok(ModelState {
                    m: FieldP1 { coeffs: m },
                    u: FieldP1 { coeffs: u },
                });
            }
            let jac = self.jacobian(state, &m, &u, &du.coeffs);
            let rhs: Vec<[f64; 2]> = (0..n).map(|i| [-rm[i], -ru[i]]).collect();
            let delta = jac.solve(&rhs)?;

            // Full step with halving fallback: accept the first candidate
            // that reduces the residual, otherwise the best one tried.
            let mut best: Option<(f64, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> = None;
            let mut scale = 1.0;
            for _ in 0..=8 {
                let mc: Vec<f64> = (0..n).map(|i| m[i] + scale * delta[i][0]).collect();
                let uc: Vec<f64> = (0..n).map(|i| u[i] + scale * delta[i][1]).collect();
                let mut rmc = Vec::with_capacity(n);
                let mut ruc = Vec::with_capacity(n);
                self.residual(state, &mc, &uc, &du.coeffs, &mut rmc, &mut ruc);
                let nc = self.residual_norm(&rmc, &ruc);
                let better_than_best = best.as_ref().map_or(true, |(bn, ..)| nc < *bn);
                if nc.is_finite() && better_than_best {
                    let accepted = nc < norm;
                    best = Some((nc, mc, uc, rmc, ruc));
                    if accepted {
                        break;
                    }
                }
                scale *= 0.5;
            }
            match best {
                Some((nc, mc, uc, rmc, ruc)) => {
                    m = mc;
                    u = uc;
                    rm = rmc;
                    ru = ruc;
                    norm = nc;
                }
                None => {
                    return Err(ModelError::NewtonDiverged {
                        iterations: iter + 1,
                        residual: norm,
                    })
                }
            }
        }

        if norm <= tol {
            Ok(ModelState {
                m: FieldP1 { coeffs: m },
                u: FieldP1 { coeffs: u },
            })
        } else {
            Err(ModelError::NewtonDiverged {
                iterations: self.params.newton_max_iters,
                residual: norm,
            })
        }
    }

    /// Apply smooth-then-step over a whole window; deterministic in
    /// (state, path).
    pub fn evolve_window(
        &self,
        state: &ModelState,
        path: &NoisePath,
        smoother: &MaternSmoother,
    ) -> Result<ModelState, ModelError> {
        let states = self.evolve_window_states(state, path, smoother)?;
        Ok(states.into_iter().next_back().expect("at least one state"))
    }

    /// Same as [`Self::evolve_window`] but keeps every intermediate level,
    /// which the adjoint sweep needs.
    pub fn evolve_window_states(
        &self,
        state: &ModelState,
        path: &NoisePath,
        smoother: &MaternSmoother,
    ) -> Result<Vec<ModelState>, ModelError> {
        let mut states = Vec::with_capacity(path.n_steps() + 1);
        states.push(state.clone());
        for step_idx in 0..path.n_steps() {
            let w = crate::grid::FieldDG0 {
                coeffs: path.dw_step(step_idx).to_vec(),
            };
            let du = smoother.smooth_increment(
                &w,
                path.lambda_step(step_idx),
                self.params.dt,
                &self.ops,
            )?;
            let next = self.step(states.last().expect("nonempty"), &du)?;
            states.push(next);
        }
        Ok(states)
    }

    /// Reverse sweep through the window: given the gradient of a scalar
    /// functional with respect to the final velocity field, returns its
    /// gradient with respect to every control entry (steps x cells, flat),
    /// excluding the Girsanov contribution.
    pub fn window_lambda_gradient(
        &self,
        states: &[ModelState],
        path: &NoisePath,
        smoother: &MaternSmoother,
        terminal_grad_u: &[f64],
    ) -> Result<Vec<f64>, ModelError> {
        let n = self.ops.n();
        let n_steps = path.n_steps();
        debug_assert_eq!(states.len(), n_steps + 1);
        let dt = self.params.dt;
        let lambda_scale = smoother.lambda_scale(dt);

        let mut g_m = vec![0.0; n];
        let mut g_u = terminal_grad_u.to_vec();
        let mut grads = vec![0.0; n_steps * n];

        for j in (0..n_steps).rev() {
            let prev = &states[j];
            let next = &states[j + 1];
            let w = crate::grid::FieldDG0 {
                coeffs: path.dw_step(j).to_vec(),
            };
            let du = smoother.smooth_increment(&w, path.lambda_step(j), dt, &self.ops)?;

            let jac = self.jacobian(prev, &next.m.coeffs, &next.u.coeffs, &du.coeffs);
            let stacked: Vec<[f64; 2]> = (0..n).map(|i| [g_m[i], g_u[i]]).collect();
            let wvec = jac.transpose().solve(&stacked)?;
            let w_m: Vec<f64> = wvec.iter().map(|v| v[0]).collect();

            // Shared transport linearisations at this step's midpoint.
            let mbar: Vec<f64> = next
                .m
                .coeffs
                .iter()
                .zip(&prev.m.coeffs)
                .map(|(a, b)| 0.5 * (a + b))
                .collect();
            let dv: Vec<f64> = next
                .u
                .coeffs
                .iter()
                .zip(&prev.u.coeffs)
                .zip(&du.coeffs)
                .map(|((un, up), d)| dt * 0.5 * (un + up) + d)
                .collect();
            let (a_mat, b_mat) = transport_jacobians(&mbar, &dv);
            let bt = b_mat.transpose();
            let at = a_mat.transpose();

            // Gradient with respect to the smoothed increment of step j.
            let mut g_du = bt.apply(&w_m);
            for v in g_du.iter_mut() {
                *v = -*v;
            }
            let cells = smoother.adjoint_cells(&g_du, &self.ops)?;
            for i in 0..n {
                grads[j * n + i] = cells[i] * lambda_scale;
            }

            // Propagate to the previous level:
            //   g_m <- M w_m - (mu dt / 2) K w_m - (1/2) A^T w_m
            //   g_u <- -(dt/2) B^T w_m
            let m_wm = self.ops.mass().apply(&w_m);
            let k_wm = self.ops.stiffness().apply(&w_m);
            let at_wm = at.apply(&w_m);
            let bt_wm = bt.apply(&w_m);
            for i in 0..n {
                g_m[i] = m_wm[i] - 0.5 * self.params.mu * dt * k_wm[i] - 0.5 * at_wm[i];
                g_u[i] = -0.5 * dt * bt_wm[i];
            }
        }
        Ok(grads)
    }
}

/// Accumulate the transport form T(a, b)_i = (a dx b, phi_i) - (a b, dx phi_i)
/// into `out`, using two-point Gauss quadrature per cell (exact for the
/// degree-3 products appearing here).
fn transport_residual(a: &[f64], b: &[f64], out: &mut [f64]) {
    let n = a.len();
    let half_inv_sqrt3 = 0.5 / 3f64.sqrt();
    let gp = [0.5 - half_inv_sqrt3, 0.5 + half_inv_sqrt3];
    for e in 0..n {
        let e1 = if e + 1 == n { 0 } else { e + 1 };
        let (a0, a1) = (a[e], a[e1]);
        let (b0, b1) = (b[e], b[e1]);
        let db = b1 - b0;
        let mut r0 = 0.0;
        let mut r1 = 0.0;
        for s in gp {
            let ag = a0 * (1.0 - s) + a1 * s;
            let bg = b0 * (1.0 - s) + b1 * s;
            r0 += 0.5 * (ag * db * (1.0 - s) + ag * bg);
            r1 += 0.5 * (ag * db * s - ag * bg);
        }
        out[e] += r0;
        out[e1] += r1;
    }
}

/// Linearisations of the transport form: (dT/da, dT/db) at (a, b), both
/// cyclic tridiagonal.
fn transport_jacobians(a: &[f64], b: &[f64]) -> (CyclicTridiag, CyclicTridiag) {
    let n = a.len();
    let half_inv_sqrt3 = 0.5 / 3f64.sqrt();
    let gp = [0.5 - half_inv_sqrt3, 0.5 + half_inv_sqrt3];
    let mut da = CyclicTridiag::zeros(n);
    let mut db_mat = CyclicTridiag::zeros(n);
    for e in 0..n {
        let e1 = if e + 1 == n { 0 } else { e + 1 };
        let (a0, a1) = (a[e], a[e1]);
        let (b0, b1) = (b[e], b[e1]);
        let db = b1 - b0;
        let mut r0_a0 = 0.0;
        let mut r0_a1 = 0.0;
        let mut r1_a0 = 0.0;
        let mut r1_a1 = 0.0;
        let mut abar = 0.0;
        for s in gp {
            let ag = a0 * (1.0 - s) + a1 * s;
            let bg = b0 * (1.0 - s) + b1 * s;
            let t0 = db * (1.0 - s) + bg;
            let t1 = db * s - bg;
            r0_a0 += 0.5 * (1.0 - s) * t0;
            r0_a1 += 0.5 * s * t0;
            r1_a0 += 0.5 * (1.0 - s) * t1;
            r1_a1 += 0.5 * s * t1;
            abar += 0.5 * ag;
        }
        da.diag[e] += r0_a0;
        da.sup[e] += r0_a1;
        da.sub[e1] += r1_a0;
        da.diag[e1] += r1_a1;
        // d r0 / d b0 and d r1 / d b1 vanish identically; the remaining
        // couplings are +/- the cell average of a.
        db_mat.sup[e] += abar;
        db_mat.sub[e1] -= abar;
    }
    (da, db_mat)
}
