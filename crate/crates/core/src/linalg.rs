//! Direct solvers for the periodic banded systems produced by P1 assembly
//! on a uniform mesh: scalar cyclic tridiagonal matrices (mass, stiffness,
//! Helmholtz-type combinations) and the cyclic block-tridiagonal systems
//! with 2x2 blocks that arise from the coupled momentum/velocity Newton
//! updates.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("system dimension {0} too small for a cyclic band solver (need >= 4)")]
    TooSmall(usize),
    #[error("near-singular pivot at row {0}")]
    SingularPivot(usize),
    #[error("dimension mismatch: matrix is {expected}, vector is {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

const PIVOT_FLOOR: f64 = 1e-300;

/// Cyclic tridiagonal matrix: row `i` couples columns `i-1`, `i`, `i+1`
/// modulo `n`, so `sub[0]` sits at `(0, n-1)` and `sup[n-1]` at `(n-1, 0)`.
#[derive(Debug, Clone)]
pub struct CyclicTridiag {
    pub sub: Vec<f64>,
    pub diag: Vec<f64>,
    pub sup: Vec<f64>,
}

impl CyclicTridiag {
    pub fn zeros(n: usize) -> Self {
        Self {
            sub: vec![0.0; n],
            diag: vec![0.0; n],
            sup: vec![0.0; n],
        }
    }

    /// Constant-stencil matrix, the shape every operator on a uniform
    /// periodic mesh takes.
    pub fn from_stencil(n: usize, sub: f64, diag: f64, sup: f64) -> Self {
        Self {
            sub: vec![sub; n],
            diag: vec![diag; n],
            sup: vec![sup; n],
        }
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    pub fn matvec(&self, x: &[f64], out: &mut [f64]) {
        let n = self.len();
        debug_assert_eq!(x.len(), n);
        debug_assert_eq!(out.len(), n);
        for i in 0..n {
            let im1 = if i == 0 { n - 1 } else { i - 1 };
            let ip1 = if i + 1 == n { 0 } else { i + 1 };
            out[i] = self.sub[i] * x[im1] + self.diag[i] * x[i] + self.sup[i] * x[ip1];
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.matvec(x, &mut out);
        out
    }

    /// `self + factor * other`, entrywise on the bands.
    pub fn add_scaled(&self, other: &CyclicTridiag, factor: f64) -> CyclicTridiag {
        let n = self.len();
        assert_eq!(n, other.len());
        let mut out = self.clone();
        for i in 0..n {
            out.sub[i] += factor * other.sub[i];
            out.diag[i] += factor * other.diag[i];
            out.sup[i] += factor * other.sup[i];
        }
        out
    }

    pub fn scale(&self, factor: f64) -> CyclicTridiag {
        let mut out = self.clone();
        for i in 0..self.len() {
            out.sub[i] *= factor;
            out.diag[i] *= factor;
            out.sup[i] *= factor;
        }
        out
    }

    pub fn transpose(&self) -> CyclicTridiag {
        let n = self.len();
        let mut out = CyclicTridiag::zeros(n);
        for i in 0..n {
            let ip1 = if i + 1 == n { 0 } else { i + 1 };
            out.diag[i] = self.diag[i];
            // (A^T)[i][i+1] = A[i+1][i]
            out.sup[i] = self.sub[ip1];
            out.sub[ip1] = self.sup[i];
        }
        out
    }

    /// Factorise once for repeated O(n) solves. Uses the Sherman-Morrison
    /// reduction of the cyclic system to a plain tridiagonal solve.
    pub fn factor(&self) -> Result<CyclicTridiagFactor, LinalgError> {
        CyclicTridiagFactor::new(self)
    }

    /// LDL^T-style positive-definiteness certificate for a symmetric cyclic
    /// tridiagonal matrix: eliminates rows 0..n-2 keeping the last row as a
    /// border, and checks that every pivot plus the final Schur complement
    /// stays positive.
    pub fn ldlt_is_positive_definite(&self) -> bool {
        let n = self.len();
        if n < 4 {
            return false;
        }
        // Border column: coefficients of x_{n-1} in rows 0..n-2.
        let mut p = vec![0.0; n - 1];
        p[0] = self.sub[0];
        p[n - 2] = self.sup[n - 2];
        let mut d = vec![0.0; n - 1];
        let mut e = vec![0.0; n - 1]; // e[i] = subdiagonal multiplier storage
        d[0] = self.diag[0];
        if d[0] <= 0.0 {
            return false;
        }
        for i in 1..n - 1 {
            e[i] = self.sub[i] / d[i - 1];
            d[i] = self.diag[i] - e[i] * self.sup[i - 1];
            p[i] -= e[i] * p[i - 1];
            if d[i] <= 0.0 || !d[i].is_finite() {
                return false;
            }
        }
        // p now holds L^{-1} q; the bordered Schur complement must stay
        // positive as well.
        let mut schur = self.diag[n - 1];
        for i in 0..n - 1 {
            schur -= p[i] * p[i] / d[i];
        }
        schur > 0.0 && schur.is_finite()
    }
}

/// Cached factorisation of a [`CyclicTridiag`]. The cyclic couplings are
/// pulled out as a rank-one update; each `solve` is then one Thomas sweep
/// plus the Sherman-Morrison correction.
#[derive(Debug, Clone)]
pub struct CyclicTridiagFactor {
    n: usize,
    sub: Vec<f64>,
    inv_denom: Vec<f64>,
    cp: Vec<f64>,
    /// z = A'^{-1} u for the rank-one correction term.
    z: Vec<f64>,
    /// v = e_0 + (beta/gamma) e_{n-1}
    v_last: f64,
    sm_denom: f64,
}

impl CyclicTridiagFactor {
    fn new(a: &CyclicTridiag) -> Result<Self, LinalgError> {
        let n = a.len();
        if n < 4 {
            return Err(LinalgError::TooSmall(n));
        }
        let beta = a.sub[0]; // A[0][n-1]
        let alpha = a.sup[n - 1]; // A[n-1][0]
        let gamma = -a.diag[0];
        if gamma.abs() < PIVOT_FLOOR {
            return Err(LinalgError::SingularPivot(0));
        }

        // Modified diagonal with the corners folded into a rank-one term.
        let mut diag = a.diag.clone();
        diag[0] -= gamma;
        diag[n - 1] -= alpha * beta / gamma;

        let mut inv_denom = vec![0.0; n];
        let mut cp = vec![0.0; n];
        let mut denom = diag[0];
        if denom.abs() < PIVOT_FLOOR {
            return Err(LinalgError::SingularPivot(0));
        }
        inv_denom[0] = 1.0 / denom;
        cp[0] = a.sup[0] * inv_denom[0];
        for i in 1..n {
            denom = diag[i] - a.sub[i] * cp[i - 1];
            if denom.abs() < PIVOT_FLOOR || !denom.is_finite() {
                return Err(LinalgError::SingularPivot(i));
            }
            inv_denom[i] = 1.0 / denom;
            if i + 1 < n {
                cp[i] = a.sup[i] * inv_denom[i];
            }
        }

        let mut this = Self {
            n,
            sub: a.sub.clone(),
            inv_denom,
            cp,
            z: Vec::new(),
            v_last: beta / gamma,
            sm_denom: 1.0,
        };

        let mut u = vec![0.0; n];
        u[0] = gamma;
        u[n - 1] = alpha;
        let mut z = u;
        this.thomas_in_place(&mut z);
        let sm_denom = 1.0 + z[0] + this.v_last * z[n - 1];
        if sm_denom.abs() < PIVOT_FLOOR || !sm_denom.is_finite() {
            return Err(LinalgError::SingularPivot(n - 1));
        }
        this.z = z;
        this.sm_denom = sm_denom;
        Ok(this)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// All Thomas pivots of the reduced system were positive and the
    /// correction denominator is positive: a cheap Cholesky-style
    /// certificate for symmetric positive definite input.
    pub fn positive_pivots(&self) -> bool {
        self.inv_denom.iter().all(|&d| d > 0.0) && self.sm_denom > 0.0
    }

    fn thomas_in_place(&self, x: &mut [f64]) {
        let n = self.n;
        x[0] *= self.inv_denom[0];
        for i in 1..n {
            x[i] = (x[i] - self.sub[i] * x[i - 1]) * self.inv_denom[i];
        }
        for i in (0..n - 1).rev() {
            x[i] -= self.cp[i] * x[i + 1];
        }
    }

    pub fn solve_in_place(&self, rhs: &mut [f64]) {
        debug_assert_eq!(rhs.len(), self.n);
        self.thomas_in_place(rhs);
        let vy = rhs[0] + self.v_last * rhs[self.n - 1];
        let scale = vy / self.sm_denom;
        for i in 0..self.n {
            rhs[i] -= scale * self.z[i];
        }
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let mut x = rhs.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}

// --- 2x2 block helpers (row-major [a00, a01, a10, a11]) ---

pub type Block2 = [f64; 4];

#[inline]
fn b2_mul(a: &Block2, b: &Block2) -> Block2 {
    [
        a[0] * b[0] + a[1] * b[2],
        a[0] * b[1] + a[1] * b[3],
        a[2] * b[0] + a[3] * b[2],
        a[2] * b[1] + a[3] * b[3],
    ]
}

#[inline]
fn b2_matvec(a: &Block2, v: &[f64; 2]) -> [f64; 2] {
    [a[0] * v[0] + a[1] * v[1], a[2] * v[0] + a[3] * v[1]]
}

#[inline]
fn b2_sub(a: &Block2, b: &Block2) -> Block2 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2], a[3] - b[3]]
}

#[inline]
fn b2_inv(a: &Block2, row: usize) -> Result<Block2, LinalgError> {
    let det = a[0] * a[3] - a[1] * a[2];
    if det.abs() < PIVOT_FLOOR || !det.is_finite() {
        return Err(LinalgError::SingularPivot(row));
    }
    let inv = 1.0 / det;
    Ok([a[3] * inv, -a[1] * inv, -a[2] * inv, a[0] * inv])
}

/// Cyclic block-tridiagonal matrix with 2x2 blocks; same wrap convention as
/// [`CyclicTridiag`] at the block level.
#[derive(Debug, Clone)]
pub struct BlockCyclicTridiag {
    pub sub: Vec<Block2>,
    pub diag: Vec<Block2>,
    pub sup: Vec<Block2>,
}

impl BlockCyclicTridiag {
    pub fn zeros(n: usize) -> Self {
        Self {
            sub: vec![[0.0; 4]; n],
            diag: vec![[0.0; 4]; n],
            sup: vec![[0.0; 4]; n],
        }
    }

    /// Assemble from four cyclic tridiagonal component matrices laid out as
    /// [[a, b], [c, d]] at every scalar position.
    pub fn from_components(
        a: &CyclicTridiag,
        b: &CyclicTridiag,
        c: &CyclicTridiag,
        d: &CyclicTridiag,
    ) -> Self {
        let n = a.len();
        let mut out = Self::zeros(n);
        for i in 0..n {
            out.sub[i] = [a.sub[i], b.sub[i], c.sub[i], d.sub[i]];
            out.diag[i] = [a.diag[i], b.diag[i], c.diag[i], d.diag[i]];
            out.sup[i] = [a.sup[i], b.sup[i], c.sup[i], d.sup[i]];
        }
        out
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    pub fn transpose(&self) -> Self {
        let n = self.len();
        let mut out = Self::zeros(n);
        for i in 0..n {
            let ip1 = if i + 1 == n { 0 } else { i + 1 };
            let t = |m: &Block2| [m[0], m[2], m[1], m[3]];
            out.diag[i] = t(&self.diag[i]);
            out.sup[i] = t(&self.sub[ip1]);
            out.sub[ip1] = t(&self.sup[i]);
        }
        out
    }

    pub fn matvec(&self, x: &[[f64; 2]], out: &mut [[f64; 2]]) {
        let n = self.len();
        for i in 0..n {
            let im1 = if i == 0 { n - 1 } else { i - 1 };
            let ip1 = if i + 1 == n { 0 } else { i + 1 };
            let a = b2_matvec(&self.sub[i], &x[im1]);
            let b = b2_matvec(&self.diag[i], &x[i]);
            let c = b2_matvec(&self.sup[i], &x[ip1]);
            out[i] = [a[0] + b[0] + c[0], a[1] + b[1] + c[1]];
        }
    }

    /// Direct solve by bordered block elimination: block-Thomas over rows
    /// 0..n-2 carrying the last block unknown as a border column, then a
    /// 2x2 Schur solve for it and a back-fill.
    pub fn solve(&self, rhs: &[[f64; 2]]) -> Result<Vec<[f64; 2]>, LinalgError> {
        let n = self.len();
        if n < 4 {
            return Err(LinalgError::TooSmall(n));
        }
        if rhs.len() != n {
            return Err(LinalgError::DimensionMismatch {
                expected: n,
                got: rhs.len(),
            });
        }
        let m = n - 1;

        // Forward block elimination over rows 0..m-1 with the border column
        // g holding each row's coupling to x_{n-1}.
        let mut inv_d = vec![[0.0; 4]; m];
        let mut p: Vec<[f64; 2]> = rhs[..m].to_vec();
        let mut g = vec![[0.0f64; 4]; m];
        g[0] = self.sub[0];
        g[m - 1] = b2_add(&g[m - 1], &self.sup[m - 1]);

        inv_d[0] = b2_inv(&self.diag[0], 0)?;
        for i in 1..m {
            let l = b2_mul(&self.sub[i], &inv_d[i - 1]);
            let dtil = b2_sub(&self.diag[i], &b2_mul(&l, &self.sup[i - 1]));
            inv_d[i] = b2_inv(&dtil, i)?;
            let lp = b2_matvec(&l, &p[i - 1]);
            p[i] = [p[i][0] - lp[0], p[i][1] - lp[1]];
            g[i] = b2_sub(&g[i], &b2_mul(&l, &g[i - 1]));
        }

        // Back substitution in the affine form x_i = a_i + B_i x_{n-1}.
        let mut av = vec![[0.0f64; 2]; m];
        let mut bm = vec![[0.0f64; 4]; m];
        av[m - 1] = b2_matvec(&inv_d[m - 1], &p[m - 1]);
        bm[m - 1] = b2_mul(&inv_d[m - 1], &g[m - 1]);
        bm[m - 1] = [-bm[m - 1][0], -bm[m - 1][1], -bm[m - 1][2], -bm[m - 1][3]];
        for i in (0..m - 1).rev() {
            let sa = b2_matvec(&self.sup[i], &av[i + 1]);
            let t = [p[i][0] - sa[0], p[i][1] - sa[1]];
            av[i] = b2_matvec(&inv_d[i], &t);
            let sb = b2_mul(&self.sup[i], &bm[i + 1]);
            let tb = b2_add(&sb, &g[i]);
            let nb = b2_mul(&inv_d[i], &tb);
            bm[i] = [-nb[0], -nb[1], -nb[2], -nb[3]];
        }

        // Schur system for the border unknown.
        let mut schur = b2_add(&self.diag[n - 1], &b2_mul(&self.sub[n - 1], &bm[m - 1]));
        schur = b2_add(&schur, &b2_mul(&self.sup[n - 1], &bm[0]));
        let r1 = b2_matvec(&self.sub[n - 1], &av[m - 1]);
        let r2 = b2_matvec(&self.sup[n - 1], &av[0]);
        let srhs = [rhs[n - 1][0] - r1[0] - r2[0], rhs[n - 1][1] - r1[1] - r2[1]];
        let x_last = b2_matvec(&b2_inv(&schur, n - 1)?, &srhs);

        let mut x = vec![[0.0f64; 2]; n];
        x[n - 1] = x_last;
        for i in 0..m {
            let bx = b2_matvec(&bm[i], &x_last);
            x[i] = [av[i][0] + bx[0], av[i][1] + bx[1]];
        }
        Ok(x)
    }
}

#[inline]
fn b2_add(a: &Block2, b: &Block2) -> Block2 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2], a[3] + b[3]]
}
