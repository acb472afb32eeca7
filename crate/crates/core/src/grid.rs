//! Uniform periodic 1D mesh, the P1/DG0 finite element spaces on it, and
//! the assembled bilinear forms every other module consumes.
//!
//! Periodicity is enforced by index wrap in assembly (node N is identified
//! with node 0), which makes every operator a cyclic tridiagonal matrix and
//! keeps all solves O(N).

use crate::linalg::{CyclicTridiag, CyclicTridiagFactor, LinalgError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid mesh: need at least 4 cells, got {0}")]
    InvalidMesh(usize),
    #[error("invalid mesh: domain length must be positive and finite, got {0}")]
    InvalidLength(f64),
    #[error("mesh mismatch: expected {expected} coefficients, got {got}")]
    MeshMismatch { expected: usize, got: usize },
    #[error("coordinate {x} outside the periodic domain [0, {length})")]
    OutOfDomain { x: f64, length: f64 },
    #[error(transparent)]
    Solver(#[from] LinalgError),
}

/// Uniform mesh of the periodic interval [0, L) with N cells of width h.
/// Cell N-1 abuts cell 0; node i sits at x = i h.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mesh {
    length: f64,
    n_cells: usize,
    cell_width: f64,
}

impl Mesh {
    pub fn new(length: f64, n_cells: usize) -> Result<Self, GridError> {
        if !(length.is_finite() && length > 0.0) {
            return Err(GridError::InvalidLength(length));
        }
        if n_cells < 4 {
            return Err(GridError::InvalidMesh(n_cells));
        }
        Ok(Self {
            length,
            n_cells,
            cell_width: length / n_cells as f64,
        })
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    /// Cell width h = L/N; also the area A_i of every cell.
    pub fn cell_width(&self) -> f64 {
        self.cell_width
    }

    pub fn node_x(&self, i: usize) -> f64 {
        i as f64 * self.cell_width
    }
}

/// Continuous piecewise-linear field: one coefficient per node, node N
/// identified with node 0.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldP1 {
    pub coeffs: Vec<f64>,
}

impl FieldP1 {
    pub fn zeros(n: usize) -> Self {
        Self {
            coeffs: vec![0.0; n],
        }
    }

    pub fn constant(n: usize, value: f64) -> Self {
        Self {
            coeffs: vec![value; n],
        }
    }

    pub fn from_fn(mesh: &Mesh, f: impl Fn(f64) -> f64) -> Self {
        Self {
            coeffs: (0..mesh.n_cells()).map(|i| f(mesh.node_x(i))).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }
}

/// Piecewise-constant field: one coefficient per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldDG0 {
    pub coeffs: Vec<f64>,
}

impl FieldDG0 {
    pub fn zeros(n: usize) -> Self {
        Self {
            coeffs: vec![0.0; n],
        }
    }

    pub fn constant(n: usize, value: f64) -> Self {
        Self {
            coeffs: vec![value; n],
        }
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }
}

/// Assembled P1 element matrices on the periodic mesh, plus the mixed
/// P1 x DG0 mass action, shared read-only by the dynamics and noise
/// modules. Immutable after assembly.
#[derive(Debug, Clone)]
pub struct FemOperators {
    n: usize,
    h: f64,
    mass: CyclicTridiag,
    stiffness: CyclicTridiag,
    mass_factor: CyclicTridiagFactor,
}

/// Assemble mass and stiffness from the analytic P1 element matrices on a
/// uniform grid (mass row h/6, 2h/3, h/6; stiffness row -1/h, 2/h, -1/h)
/// with periodic wrap.
pub fn assemble(mesh: &Mesh) -> Result<FemOperators, GridError> {
    let n = mesh.n_cells();
    if n < 4 {
        return Err(GridError::InvalidMesh(n));
    }
    let h = mesh.cell_width();
    let mass = CyclicTridiag::from_stencil(n, h / 6.0, 2.0 * h / 3.0, h / 6.0);
    let stiffness = CyclicTridiag::from_stencil(n, -1.0 / h, 2.0 / h, -1.0 / h);
    let mass_factor = mass.factor()?;
    Ok(FemOperators {
        n,
        h,
        mass,
        stiffness,
        mass_factor,
    })
}

impl FemOperators {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn cell_width(&self) -> f64 {
        self.h
    }

    pub fn mass(&self) -> &CyclicTridiag {
        &self.mass
    }

    pub fn stiffness(&self) -> &CyclicTridiag {
        &self.stiffness
    }

    pub fn mass_factor(&self) -> &CyclicTridiagFactor {
        &self.mass_factor
    }

    /// Load vector (f, phi_i) for a DG0 function f: each hat function
    /// integrates to h/2 against the two cells it touches.
    pub fn mixed_load(&self, f: &FieldDG0) -> Result<Vec<f64>, GridError> {
        self.check_len(f.len())?;
        let n = self.n;
        let half_h = 0.5 * self.h;
        let mut out = vec![0.0; n];
        for i in 0..n {
            let left = if i == 0 { n - 1 } else { i - 1 };
            out[i] = half_h * (f.coeffs[left] + f.coeffs[i]);
        }
        Ok(out)
    }

    /// Transpose of [`Self::mixed_load`]: maps a nodal vector to cell values.
    pub fn mixed_load_transpose(&self, g: &[f64]) -> Result<Vec<f64>, GridError> {
        self.check_len(g.len())?;
        let n = self.n;
        let half_h = 0.5 * self.h;
        let mut out = vec![0.0; n];
        for cell in 0..n {
            let right = if cell + 1 == n { 0 } else { cell + 1 };
            out[cell] = half_h * (g[cell] + g[right]);
        }
        Ok(out)
    }

    fn check_len(&self, got: usize) -> Result<(), GridError> {
        if got != self.n {
            return Err(GridError::MeshMismatch {
                expected: self.n,
                got,
            });
        }
        Ok(())
    }

    /// Discrete L2 norm sqrt(x^T M x).
    pub fn l2_norm(&self, a: &FieldP1) -> Result<f64, GridError> {
        Ok(inner_l2(a, a, self)?.max(0.0).sqrt())
    }
}

/// The L2 inner product a^T M b of two P1 fields on the same mesh.
pub fn inner_l2(a: &FieldP1, b: &FieldP1, ops: &FemOperators) -> Result<f64, GridError> {
    ops.check_len(a.len())?;
    ops.check_len(b.len())?;
    let mb = ops.mass.apply(&b.coeffs);
    Ok(a.coeffs.iter().zip(mb.iter()).map(|(x, y)| x * y).sum())
}

/// Piecewise-linear interpolation of a P1 field at x in [0, L), with
/// periodic wrap between node N-1 and node 0.
pub fn eval_at(field: &FieldP1, x: f64, mesh: &Mesh) -> Result<f64, GridError> {
    if !(x >= 0.0 && x < mesh.length()) || !x.is_finite() {
        return Err(GridError::OutOfDomain {
            x,
            length: mesh.length(),
        });
    }
    if field.len() != mesh.n_cells() {
        return Err(GridError::MeshMismatch {
            expected: mesh.n_cells(),
            got: field.len(),
        });
    }
    let n = mesh.n_cells();
    let h = mesh.cell_width();
    let cell = ((x / h) as usize).min(n - 1);
    let s = (x - cell as f64 * h) / h;
    let right = if cell + 1 == n { 0 } else { cell + 1 };
    Ok(field.coeffs[cell] * (1.0 - s) + field.coeffs[right] * s)
}
