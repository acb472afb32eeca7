//! Data assimilation for the viscous stochastic Camassa-Holm equation with
//! transport noise on a periodic 1D domain.
//!
//! The crate provides a P1/DG0 finite element discretisation on a uniform
//! periodic mesh ([`grid`]), white-noise increments smoothed through an
//! elliptic cascade ([`gaussian_field`]), a Stratonovich midpoint
//! timestepper with an analytic Jacobian and adjoint ([`sch_dynamics`]),
//! point observations and Gaussian likelihoods ([`observing`]), and a
//! particle-filter stack with bootstrap resampling, adaptive tempering,
//! PCN jittering, and Girsanov-corrected nudging ([`filtering`]). Particle
//! work runs batch-parallel with counter-keyed random streams
//! ([`ensemble_runtime`]); experiments, diagnostics, and output artifacts
//! live in [`experiment`], [`diagnostics`], and [`plot`].

pub mod config;
pub mod diagnostics;
pub mod ensemble_runtime;
pub mod experiment;
pub mod filtering;
pub mod gaussian_field;
pub mod grid;
pub mod linalg;
pub mod model;
pub mod observing;
pub mod plot;
pub mod sch_dynamics;

pub use config::{FilterMode, RunConfig};
pub use gaussian_field::{MaternParams, MaternSmoother, NoisePath};
pub use grid::{assemble, eval_at, inner_l2, FemOperators, FieldDG0, FieldP1, Mesh};
pub use model::SchModel;
pub use observing::{ess, log_likelihood, observe, ObsConfig, ObsRecord};
pub use sch_dynamics::{ModelState, SchParams, SchStepper};
