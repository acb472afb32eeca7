//! Ensemble-versus-truth statistics computed at every assimilation step:
//! ensemble mean relative error (EMRE), relative bias of the ensemble mean
//! (RB), and relative ensemble spread (RES). All norms are mass-weighted
//! discrete L2 norms so values are mesh independent.

use crate::grid::{FemOperators, FieldP1, GridError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("truth field has zero norm; relative statistics are undefined")]
    ZeroNormTruth,
    #[error("need at least {needed} particles, got {got}")]
    TooFewParticles { needed: usize, got: usize },
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Per-assimilation-step statistics row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub step: usize,
    pub emre: f64,
    pub rb: f64,
    pub res: f64,
    pub ess_pre: f64,
    pub n_temper: usize,
}

fn diff_norm(a: &FieldP1, b: &FieldP1, ops: &FemOperators) -> Result<f64, GridError> {
    let d = FieldP1 {
        coeffs: a
            .coeffs
            .iter()
            .zip(&b.coeffs)
            .map(|(x, y)| x - y)
            .collect(),
    };
    ops.l2_norm(&d)
}

/// Mean over particles of the relative L2 distance to the truth.
pub fn emre(
    truth: &FieldP1,
    ensemble: &[&FieldP1],
    ops: &FemOperators,
) -> Result<f64, DiagnosticsError> {
    if ensemble.is_empty() {
        return Err(DiagnosticsError::TooFewParticles { needed: 1, got: 0 });
    }
    let truth_norm = ops.l2_norm(truth)?;
    if truth_norm <= 0.0 {
        return Err(DiagnosticsError::ZeroNormTruth);
    }
    let mut acc = 0.0;
    for member in ensemble {
        acc += diff_norm(truth, member, ops)? / truth_norm;
    }
    Ok(acc / ensemble.len() as f64)
}

pub fn ensemble_mean(ensemble: &[&FieldP1]) -> FieldP1 {
    let n = ensemble[0].len();
    let mut mean = vec![0.0; n];
    for member in ensemble {
        for (m, v) in mean.iter_mut().zip(&member.coeffs) {
            *m += v;
        }
    }
    let scale = 1.0 / ensemble.len() as f64;
    for m in mean.iter_mut() {
        *m *= scale;
    }
    FieldP1 { coeffs: mean }
}

/// Relative error of the ensemble mean.
pub fn rb(
    truth: &FieldP1,
    ensemble: &[&FieldP1],
    ops: &FemOperators,
) -> Result<f64, DiagnosticsError> {
    if ensemble.is_empty() {
        return Err(DiagnosticsError::TooFewParticles { needed: 1, got: 0 });
    }
    let truth_norm = ops.l2_norm(truth)?;
    if truth_norm <= 0.0 {
        return Err(DiagnosticsError::ZeroNormTruth);
    }
    let mean = ensemble_mean(ensemble);
    Ok(diff_norm(truth, &mean, ops)? / truth_norm)
}

/// Relative ensemble spread with the 1/(N_p - 1) normalisation and the
/// truth norm in the denominator.
pub fn res(
    ensemble: &[&FieldP1],
    truth: &FieldP1,
    ops: &FemOperators,
) -> Result<f64, DiagnosticsError> {
    if ensemble.len() < 2 {
        return Err(DiagnosticsError::TooFewParticles {
            needed: 2,
            got: ensemble.len(),
        });
    }
    let truth_norm = ops.l2_norm(truth)?;
    if truth_norm <= 0.0 {
        return Err(DiagnosticsError::ZeroNormTruth);
    }
    let mean = ensemble_mean(ensemble);
    let mut acc = 0.0;
    for member in ensemble {
        acc += diff_norm(member, &mean, ops)? / truth_norm;
    }
    Ok(acc / (ensemble.len() - 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{assemble, Mesh};
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn setup() -> (Mesh, FemOperators) {
        let mesh = Mesh::new(40.0, 50).unwrap();
        let ops = assemble(&mesh).unwrap();
        (mesh, ops)
    }

    #[test]
    fn emre_zero_when_all_particles_equal_truth() {
        let (mesh, ops) = setup();
        let truth = FieldP1::from_fn(&mesh, |x| 1.0 + (2.0 * PI * x / 40.0).sin());
        let members: Vec<FieldP1> = vec![truth.clone(); 5];
        let refs: Vec<&FieldP1> = members.iter().collect();
        assert_eq!(emre(&truth, &refs, &ops).unwrap(), 0.0);
    }

    #[test]
    fn emre_one_when_particles_are_doubled_truth() {
        let (mesh, ops) = setup();
        let truth = FieldP1::from_fn(&mesh, |x| 1.0 + (2.0 * PI * x / 40.0).sin());
        let doubled = FieldP1 {
            coeffs: truth.coeffs.iter().map(|v| 2.0 * v).collect(),
        };
        let members = vec![doubled; 7];
        let refs: Vec<&FieldP1> = members.iter().collect();
        assert_relative_eq!(emre(&truth, &refs, &ops).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn rb_zero_for_a_symmetric_ensemble() {
        let (mesh, ops) = setup();
        let truth = FieldP1::from_fn(&mesh, |x| 1.0 + 0.3 * (2.0 * PI * x / 40.0).cos());
        let d = FieldP1::from_fn(&mesh, |x| 0.2 * (4.0 * PI * x / 40.0).sin());
        let plus = FieldP1 {
            coeffs: truth.coeffs.iter().zip(&d.coeffs).map(|(a, b)| a + b).collect(),
        };
        let minus = FieldP1 {
            coeffs: truth.coeffs.iter().zip(&d.coeffs).map(|(a, b)| a - b).collect(),
        };
        let members = vec![plus, minus];
        let refs: Vec<&FieldP1> = members.iter().collect();
        assert!(rb(&truth, &refs, &ops).unwrap() < 1e-13);
    }

    #[test]
    fn rb_equals_emre_for_a_degenerate_ensemble() {
        let (mesh, ops) = setup();
        let truth = FieldP1::from_fn(&mesh, |x| 1.0 + 0.3 * (2.0 * PI * x / 40.0).cos());
        let off = FieldP1 {
            coeffs: truth.coeffs.iter().map(|v| v + 0.7).collect(),
        };
        let members = vec![off; 9];
        let refs: Vec<&FieldP1> = members.iter().collect();
        assert_relative_eq!(
            rb(&truth, &refs, &ops).unwrap(),
            emre(&truth, &refs, &ops).unwrap(),
            epsilon = 1e-13
        );
    }

    #[test]
    fn res_closed_form_for_two_particles() {
        // Particles u +/- d: mean is u, so the sum has two terms ||d|| and
        // the 1/(N_p - 1) = 1 normalisation gives res = 2 ||d|| / ||truth||.
        let (mesh, ops) = setup();
        let truth = FieldP1::from_fn(&mesh, |x| 1.0 + 0.1 * (2.0 * PI * x / 40.0).sin());
        let u = FieldP1::from_fn(&mesh, |x| 0.8 + 0.2 * (2.0 * PI * x / 40.0).cos());
        let d = FieldP1::from_fn(&mesh, |x| 0.05 * (6.0 * PI * x / 40.0).sin());
        let plus = FieldP1 {
            coeffs: u.coeffs.iter().zip(&d.coeffs).map(|(a, b)| a + b).collect(),
        };
        let minus = FieldP1 {
            coeffs: u.coeffs.iter().zip(&d.coeffs).map(|(a, b)| a - b).collect(),
        };
        let members = vec![plus, minus];
        let refs: Vec<&FieldP1> = members.iter().collect();
        let expected = 2.0 * ops.l2_norm(&d).unwrap() / ops.l2_norm(&truth).unwrap();
        assert_relative_eq!(res(&refs, &truth, &ops).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn res_zero_for_identical_particles_and_needs_two() {
        let (mesh, ops) = setup();
        let truth = FieldP1::from_fn(&mesh, |x| 1.0 + 0.3 * (2.0 * PI * x / 40.0).cos());
        let members = vec![truth.clone(); 4];
        let refs: Vec<&FieldP1> = members.iter().collect();
        assert_eq!(res(&refs, &truth, &ops).unwrap(), 0.0);
        let one: Vec<&FieldP1> = members.iter().take(1).collect();
        assert!(matches!(
            res(&one, &truth, &ops),
            Err(DiagnosticsError::TooFewParticles { .. })
        ));
    }

    #[test]
    fn stats_are_invariant_under_particle_relabeling() {
        let (mesh, ops) = setup();
        let truth = FieldP1::from_fn(&mesh, |x| 1.2 + 0.3 * (2.0 * PI * x / 40.0).cos());
        let members: Vec<FieldP1> = (0..6)
            .map(|k| {
                FieldP1::from_fn(&mesh, |x| {
                    1.0 + 0.1 * k as f64 + 0.2 * (2.0 * PI * (x + k as f64) / 40.0).sin()
                })
            })
            .collect();
        let fwd: Vec<&FieldP1> = members.iter().collect();
        let rev: Vec<&FieldP1> = members.iter().rev().collect();
        assert_relative_eq!(
            emre(&truth, &fwd, &ops).unwrap(),
            emre(&truth, &rev, &ops).unwrap()
        );
        assert_relative_eq!(rb(&truth, &fwd, &ops).unwrap(), rb(&truth, &rev, &ops).unwrap());
        assert_relative_eq!(
            res(&fwd, &truth, &ops).unwrap(),
            res(&rev, &truth, &ops).unwrap()
        );
    }

    #[test]
    fn rb_never_exceeds_emre_and_duplication_shifts_nondegenerate_stats() {
        let (mesh, ops) = setup();
        let truth = FieldP1::from_fn(&mesh, |x| 1.2 + 0.3 * (2.0 * PI * x / 40.0).cos());
        let members: Vec<FieldP1> = (0..5)
            .map(|k| {
                FieldP1::from_fn(&mesh, |x| {
                    0.9 + 0.17 * k as f64 + 0.1 * (2.0 * PI * x / 40.0).sin()
                })
            })
            .collect();
        let refs: Vec<&FieldP1> = members.iter().collect();
        let e = emre(&truth, &refs, &ops).unwrap();
        let b = rb(&truth, &refs, &ops).unwrap();
        assert!(b <= e + 1e-14, "rb {b} > emre {e}");

        // Duplicating one particle and dropping another changes emre/res on
        // a non-degenerate ensemble (guards against silent aggregation
        // bugs); on a fully degenerate ensemble it cannot.
        let mut tweaked: Vec<&FieldP1> = members.iter().collect();
        tweaked[4] = members.first().unwrap();
        let e2 = emre(&truth, &tweaked, &ops).unwrap();
        assert!((e2 - e).abs() > 1e-6);
        let degenerate = vec![members[0].clone(); 5];
        let drefs: Vec<&FieldP1> = degenerate.iter().collect();
        let d1 = emre(&truth, &drefs, &ops).unwrap();
        let d2 = emre(&truth, &drefs[..4].to_vec(), &ops).unwrap();
        assert_relative_eq!(d1, d2, epsilon = 1e-14);
    }

    #[test]
    fn zero_truth_is_rejected() {
        let (_, ops) = setup();
        let truth = FieldP1::zeros(50);
        let member = FieldP1::constant(50, 1.0);
        let refs = vec![&member];
        assert!(matches!(
            emre(&truth, &refs, &ops),
            Err(DiagnosticsError::ZeroNormTruth)
        ));
    }
}
