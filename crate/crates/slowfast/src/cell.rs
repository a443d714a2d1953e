//! Fast-scale cell problems at frozen (x, t).
//!
//! Solves, on a truncated uniform y-grid,
//!   L0* rho = 0, integral(rho) = 1      (pseudo-stationary density)
//!   -L0 phi = rhs, integral(phi rho) = 0 (Poisson correctors)
//! with L0 = c^i d/dy_i + (1/2) alpha^{ij} d^2/dy_i dy_j.
//!
//! Two backends: `numeric_fd` (n = 1 dense, n = 2 matrix-free BiCGStab) and
//! `analytic_ou` (linear c, y-constant alpha: Gaussian rho, linear-in-y phi),
//! which also serves n >= 3.
//!
//! Boundary conditions: conservative zero-flux rows for rho.  For phi we use
//! zero *second* derivative along the boundary normal rather than homogeneous
//! Neumann: the adjoint-growing mode e^{|y|^2/2} turns any O(1) mismatch in
//! the imposed boundary slope into an O(1/y_b) error at the last few nodes,
//! and the correctors of interest have nonzero slope at the box edge.
//! Polynomial extrapolation is exact for the affine correctors and keeps the
//! contamination at the level of phi'' at the (negligible-mass) boundary.

use crate::error::Error;
use crate::field::VecField;
use crate::model::CoefficientSet;
use crate::Result;
use nalgebra::{DMatrix, DVector};
use std::sync::Arc;

/// Uniform tensor grid over the truncated fast-variable box.
#[derive(Clone, Debug, PartialEq)]
pub struct FastGrid {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    /// Nodes per axis (>= 129 for production use; smaller grids are allowed
    /// for refinement studies).
    pub shape: Vec<usize>,
    pub spacing: Vec<f64>,
}

impl FastGrid {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, nodes_per_axis: usize) -> Self {
        assert_eq!(lo.len(), hi.len());
        assert!(nodes_per_axis >= 2);
        let spacing = lo
            .iter()
            .zip(&hi)
            .map(|(l, h)| (h - l) / (nodes_per_axis - 1) as f64)
            .collect();
        FastGrid {
            shape: vec![nodes_per_axis; lo.len()],
            lo,
            hi,
            spacing,
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major multi-index of a flat index.
    pub fn unravel(&self, mut idx: usize) -> Vec<usize> {
        let mut mi = vec![0usize; self.dim()];
        for ax in (0..self.dim()).rev() {
            mi[ax] = idx % self.shape[ax];
            idx /= self.shape[ax];
        }
        mi
    }

    pub fn ravel(&self, mi: &[usize]) -> usize {
        let mut idx = 0;
        for ax in 0..self.dim() {
            idx = idx * self.shape[ax] + mi[ax];
        }
        idx
    }

    pub fn node(&self, idx: usize) -> Vec<f64> {
        let mi = self.unravel(idx);
        mi.iter()
            .enumerate()
            .map(|(ax, &i)| self.lo[ax] + i as f64 * self.spacing[ax])
            .collect()
    }

    /// Trapezoid quadrature weight of a node.
    pub fn weight(&self, idx: usize) -> f64 {
        let mi = self.unravel(idx);
        let mut w = 1.0;
        for ax in 0..self.dim() {
            let edge = mi[ax] == 0 || mi[ax] == self.shape[ax] - 1;
            w *= self.spacing[ax] * if edge { 0.5 } else { 1.0 };
        }
        w
    }

    /// Trapezoid quadrature of a grid function.
    pub fn quadrature(&self, u: &[f64]) -> f64 {
        u.iter()
            .enumerate()
            .map(|(i, v)| self.weight(i) * v)
            .sum()
    }

    /// A stable content hash for cache keys.
    pub fn cache_hash(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.shape.hash(&mut h);
        for v in self.lo.iter().chain(&self.hi) {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum CellBackend {
    NumericFd,
    AnalyticOu,
}

/// Solution of the cell problems at a frozen (x, t).
#[derive(Clone)]
pub struct CellSolution {
    pub x: Vec<f64>,
    pub t: f64,
    pub grid: FastGrid,
    pub rho: Vec<f64>,
    /// One column per slow component (corrector for rhs = f).
    pub phi: Vec<Vec<f64>>,
    /// Correctors for rhs = f_tilde (backward comparables).
    pub phi_tilde: Option<Vec<Vec<f64>>>,
    /// Corrector for rhs = f^{m+1} (backward extended system).
    pub phi_m1: Option<Vec<f64>>,
    /// grad_y log rho, one column per fast axis.
    pub grad_log_rho: Vec<Vec<f64>>,
    pub backend: CellBackend,
}

impl CellSolution {
    pub fn grad_log_rho_at(&self, idx: usize) -> Vec<f64> {
        self.grad_log_rho.iter().map(|col| col[idx]).collect()
    }

    /// quadrature(rho) (should be 1 within 1e-10).
    pub fn mass(&self) -> f64 {
        self.grid.quadrature(&self.rho)
    }

    /// quadrature(u * rho) — expectation under the cell density.
    pub fn average(&self, u: &[f64]) -> f64 {
        u.iter()
            .enumerate()
            .map(|(i, v)| self.grid.weight(i) * self.rho[i] * v)
            .sum()
    }

    pub fn check_invariants(&self) -> Result<()> {
        if self.rho.iter().any(|&r| r <= 0.0 || !r.is_finite()) {
            return Err(Error::LinearSolve {
                context: "cell solution".into(),
                detail: "rho not strictly positive/finite".into(),
            });
        }
        let mass = self.mass();
        if (mass - 1.0).abs() > 1e-10 {
            return Err(Error::LinearSolve {
                context: "cell solution".into(),
                detail: format!("rho mass {mass} deviates from 1"),
            });
        }
        Ok(())
    }

    /// Serialize grid + columns to a CSV writer (cache format).
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# x={:?} t={} backend={:?}", self.x, self.t, self.backend)?;
        let mut header = vec!["idx".to_string()];
        for ax in 0..self.grid.dim() {
            header.push(format!("y{ax}"));
        }
        header.push("rho".into());
        for i in 0..self.phi.len() {
            header.push(format!("phi{i}"));
        }
        writeln!(w, "{}", header.join(","))?;
        for idx in 0..self.grid.len() {
            let y = self.grid.node(idx);
            let mut row = vec![format!("{idx}")];
            for v in &y {
                row.push(format!("{:.17e}", v));
            }
            row.push(format!("{:.17e}", self.rho[idx]));
            for col in &self.phi {
                row.push(format!("{:.17e}", col[idx]));
            }
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Discrete 1-D difference stencils (per axis), second order.
// ---------------------------------------------------------------------------

/// First derivative along `axis`; central interior, one-sided second-order at
/// the two boundary layers.
fn deriv1(grid: &FastGrid, u: &[f64], axis: usize) -> Vec<f64> {
    let h = grid.spacing[axis];
    let nn = grid.shape[axis];
    let mut out = vec![0.0; u.len()];
    for idx in 0..u.len() {
        let mi = grid.unravel(idx);
        let i = mi[axis];
        let at = |k: usize| {
            let mut m2 = mi.clone();
            m2[axis] = k;
            u[grid.ravel(&m2)]
        };
        out[idx] = if i == 0 {
            (-3.0 * at(0) + 4.0 * at(1) - at(2)) / (2.0 * h)
        } else if i == nn - 1 {
            (3.0 * at(nn - 1) - 4.0 * at(nn - 2) + at(nn - 3)) / (2.0 * h)
        } else {
            (at(i + 1) - at(i - 1)) / (2.0 * h)
        };
    }
    out
}

/// Second derivative along `axis`; 3-point interior, 4-point one-sided at the
/// boundary (both second order).
fn deriv2(grid: &FastGrid, u: &[f64], axis: usize) -> Vec<f64> {
    let h = grid.spacing[axis];
    let h2 = h * h;
    let nn = grid.shape[axis];
    let mut out = vec![0.0; u.len()];
    for idx in 0..u.len() {
        let mi = grid.unravel(idx);
        let i = mi[axis];
        let at = |k: usize| {
            let mut m2 = mi.clone();
            m2[axis] = k;
            u[grid.ravel(&m2)]
        };
        out[idx] = if i == 0 {
            (2.0 * at(0) - 5.0 * at(1) + 4.0 * at(2) - at(3)) / h2
        } else if i == nn - 1 {
            (2.0 * at(nn - 1) - 5.0 * at(nn - 2) + 4.0 * at(nn - 3) - at(nn - 4)) / h2
        } else {
            (at(i + 1) - 2.0 * at(i) + at(i - 1)) / h2
        };
    }
    out
}

/// Apply the discretized fast generator L0 to a grid function.
pub fn apply_l0(
    coeffs: &CoefficientSet,
    x: &[f64],
    t: f64,
    grid: &FastGrid,
    u: &[f64],
) -> Vec<f64> {
    let n = grid.dim();
    let mut out = vec![0.0; u.len()];
    let d1: Vec<Vec<f64>> = (0..n).map(|ax| deriv1(grid, u, ax)).collect();
    let d2: Vec<Vec<f64>> = (0..n).map(|ax| deriv2(grid, u, ax)).collect();
    // Cross derivatives by composing first-derivative stencils.
    let mut cross = vec![vec![]; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            cross[i * n + j] = deriv1(grid, &d1[i], j);
        }
    }
    let mut cbuf = vec![0.0; n];
    for idx in 0..u.len() {
        let y = grid.node(idx);
        coeffs.c.eval_into(x, &y, t, &mut cbuf);
        let al = coeffs.alpha(x, &y, t);
        let mut v = 0.0;
        for i in 0..n {
            v += cbuf[i] * d1[i][idx] + 0.5 * al[(i, i)] * d2[i][idx];
            for j in (i + 1)..n {
                v += al[(i, j)] * cross[i * n + j][idx];
            }
        }
        out[idx] = v;
    }
    out
}

// ---------------------------------------------------------------------------
// Pseudo-stationary density: conservative zero-flux discretization of L0*.
// ---------------------------------------------------------------------------

/// Matrix-free application of the conservative discretization of L0* rho:
///   out = -div_y F,  F^i = c^i rho - (1/2) sum_j d/dy_j (alpha^{ij} rho)
/// with zero flux through all boundary faces.
fn apply_l0_adjoint(
    coeffs: &CoefficientSet,
    x: &[f64],
    t: f64,
    grid: &FastGrid,
    rho: &[f64],
) -> Vec<f64> {
    let n = grid.dim();
    let mut cbuf = vec![0.0; n];
    // Precompute alpha^{ij} rho as grid functions and their first derivatives
    // along each j (needed at faces via node averages).
    let len = grid.len();
    let mut alrho = vec![vec![0.0; len]; n * n];
    for idx in 0..len {
        let y = grid.node(idx);
        let al = coeffs.alpha(x, &y, t);
        for i in 0..n {
            for j in 0..n {
                alrho[i * n + j][idx] = al[(i, j)] * rho[idx];
            }
        }
    }
    let mut d_alrho = vec![vec![]; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                d_alrho[i * n + j] = deriv1(grid, &alrho[i * n + j], j);
            }
        }
    }

    let mut out = vec![0.0; len];
    for idx in 0..len {
        let mi = grid.unravel(idx);
        let mut div = 0.0;
        for ax in 0..n {
            let h = grid.spacing[ax];
            // Flux through the +face and -face along `ax`.
            let mut flux = [0.0, 0.0]; // [plus, minus]
            for (side, sgn) in [(0usize, 1isize), (1usize, -1isize)] {
                let i = mi[ax] as isize;
                let boundary = if sgn > 0 {
                    mi[ax] == grid.shape[ax] - 1
                } else {
                    mi[ax] == 0
                };
                if boundary {
                    flux[side] = 0.0;
                    continue;
                }
                let mut mo = mi.clone();
                mo[ax] = (i + sgn) as usize;
                let other = grid.ravel(&mo);
                // Face midpoint.
                let mut yface = grid.node(idx);
                yface[ax] += 0.5 * h * sgn as f64;
                coeffs.c.eval_into(x, &yface, t, &mut cbuf);
                let rho_face = 0.5 * (rho[idx] + rho[other]);
                let mut fl = cbuf[ax] * rho_face;
                // - 1/2 d/dy_ax (alpha^{ax,ax} rho): difference across the face
                fl -= 0.5 * sgn as f64 * (alrho[ax * n + ax][other] - alrho[ax * n + ax][idx]) / h;
                // - 1/2 d/dy_j (alpha^{ax,j} rho), j != ax: node-average at face
                for j in 0..n {
                    if j != ax {
                        fl -= 0.5
                            * 0.5
                            * (d_alrho[ax * n + j][idx] + d_alrho[ax * n + j][other]);
                    }
                }
                flux[side] = fl;
            }
            div += (flux[0] - flux[1]) / h;
        }
        out[idx] = -div;
    }
    out
}

/// Solve L0* rho = 0 with unit mass on the grid (numeric FD backend).
pub fn solve_pseudo_stationary(
    coeffs: &CoefficientSet,
    x: &[f64],
    t: f64,
    grid: &FastGrid,
) -> Result<Vec<f64>> {
    let len = grid.len();
    let rho = match grid.dim() {
        1 => {
            // Dense assembly by probing the (tridiagonal) conservative operator.
            let mut mat = DMatrix::zeros(len, len);
            let mut e = vec![0.0; len];
            for j in 0..len {
                e[j] = 1.0;
                let col = apply_l0_adjoint(coeffs, x, t, grid, &e);
                for i in 0..len {
                    mat[(i, j)] = col[i];
                }
                e[j] = 0.0;
            }
            // The zero-flux rows sum to zero (discrete divergence theorem), so
            // one row is redundant; replace row 0 with the normalization.
            let mut rhs = DVector::zeros(len);
            for j in 0..len {
                mat[(0, j)] = grid.weight(j);
            }
            rhs[0] = 1.0;
            let lu = mat.lu();
            lu.solve(&rhs).ok_or_else(|| Error::LinearSolve {
                context: "solve_pseudo_stationary".into(),
                detail: "singular discrete adjoint system".into(),
            })?
        }
        2 => {
            let op = |v: &[f64], out: &mut [f64]| {
                let r = apply_l0_adjoint(coeffs, x, t, grid, v);
                out.copy_from_slice(&r);
                // Normalization replaces the equation at the center node.
                let center = grid.len() / 2;
                out[center] = (0..grid.len()).map(|j| grid.weight(j) * v[j]).sum();
            };
            let mut rhs = vec![0.0; len];
            rhs[len / 2] = 1.0;
            // Initial guess: product of 1-D Gaussian-ish profiles (flat works too).
            let x0 = vec![1.0 / grid.quadrature(&vec![1.0; len]); len];
            let sol = bicgstab(&op, &rhs, &x0, 20_000, 1e-12).map_err(|detail| {
                Error::LinearSolve {
                    context: "solve_pseudo_stationary (n=2)".into(),
                    detail,
                }
            })?;
            DVector::from_vec(sol)
        }
        d => {
            return Err(Error::dim(format!(
                "numeric cell solver supports n in {{1,2}}, got {d}; use the analytic backend"
            )))
        }
    };

    let mut rho: Vec<f64> = rho.iter().copied().collect();
    // Exact renormalization (the constraint row already enforces ~1).
    let mass = grid.quadrature(&rho);
    if mass <= 0.0 || !mass.is_finite() {
        return Err(Error::LinearSolve {
            context: "solve_pseudo_stationary".into(),
            detail: format!("nonpositive mass {mass}"),
        });
    }
    for r in rho.iter_mut() {
        *r /= mass;
    }
    if rho.iter().any(|&r| r <= 0.0) {
        return Err(Error::LinearSolve {
            context: "solve_pseudo_stationary".into(),
            detail: "computed density has nonpositive nodes".into(),
        });
    }

    // Residual check: conservative operator away from the replaced row.
    let res = apply_l0_adjoint(coeffs, x, t, grid, &rho);
    let rmax = rho.iter().cloned().fold(0.0_f64, f64::max);
    let center = if grid.dim() == 2 { len / 2 } else { 0 };
    let resid = res
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != center)
        .map(|(_, v)| v.abs())
        .fold(0.0_f64, f64::max);
    let tol = if grid.dim() == 1 { 1e-8 } else { 1e-6 };
    if resid > tol * rmax.max(1.0) * (1.0 / grid.spacing[0]) {
        return Err(Error::LinearSolve {
            context: "solve_pseudo_stationary".into(),
            detail: format!("residual {resid:.3e} too large"),
        });
    }
    Ok(rho)
}

/// Solve -L0 phi = rhs with the rho-mean-zero constraint via a bordered
/// system.  `rhs` must satisfy the centering condition quadrature(rhs*rho)=0
/// within `1e-8` of its scale.
pub fn solve_poisson(
    coeffs: &CoefficientSet,
    x: &[f64],
    t: f64,
    grid: &FastGrid,
    rho: &[f64],
    rhs: &[f64],
) -> Result<Vec<f64>> {
    let len = grid.len();
    let scale = rhs
        .iter()
        .map(|v| v.abs())
        .fold(0.0_f64, f64::max)
        .max(1.0);
    let defect: f64 = (0..len).map(|i| grid.weight(i) * rho[i] * rhs[i]).sum();
    let tol = 1e-8 * scale;
    if defect.abs() > tol {
        return Err(Error::CenteringViolated {
            defect: defect.abs(),
            tol,
        });
    }

    // Row type: PDE row in the interior, zero-second-derivative extrapolation
    // rows on the boundary (see module docs).
    let is_boundary = |idx: usize| -> bool {
        let mi = grid.unravel(idx);
        mi.iter()
            .enumerate()
            .any(|(ax, &i)| i == 0 || i == grid.shape[ax] - 1)
    };

    // Operator for the bordered system [K, e; q', 0] where K = -L0 on interior
    // rows and the extrapolation stencil on boundary rows; e = indicator of
    // interior rows; q = rho-weighted quadrature row.
    let boundary_op = |v: &[f64], out: &mut [f64]| {
        // Fill boundary rows of `out` with the extrapolation residual: for
        // each axis on whose boundary the node lies, second difference = 0.
        for idx in 0..len {
            if !is_boundary(idx) {
                continue;
            }
            let mi = grid.unravel(idx);
            let mut acc = 0.0;
            for ax in 0..grid.dim() {
                let nn = grid.shape[ax];
                let at = |k: usize| {
                    let mut m2 = mi.clone();
                    m2[ax] = k;
                    v[grid.ravel(&m2)]
                };
                if mi[ax] == 0 {
                    acc += at(0) - 2.0 * at(1) + at(2);
                } else if mi[ax] == nn - 1 {
                    acc += at(nn - 1) - 2.0 * at(nn - 2) + at(nn - 3);
                }
            }
            out[idx] = acc;
        }
    };

    let apply_bordered = |v: &[f64], out: &mut [f64]| {
        // v = (phi, lambda)
        let (phi_v, lam) = v.split_at(len);
        let l0phi = apply_l0(coeffs, x, t, grid, phi_v);
        for idx in 0..len {
            out[idx] = -l0phi[idx] + lam[0];
        }
        boundary_op(phi_v, out);
        // Constraint row.
        out[len] = (0..len).map(|i| grid.weight(i) * rho[i] * phi_v[i]).sum();
    };

    let mut full_rhs = vec![0.0; len + 1];
    for idx in 0..len {
        full_rhs[idx] = if is_boundary(idx) { 0.0 } else { rhs[idx] };
    }

    let sol: Vec<f64> = match grid.dim() {
        1 => {
            let mut mat = DMatrix::zeros(len + 1, len + 1);
            let mut e = vec![0.0; len + 1];
            let mut col = vec![0.0; len + 1];
            for j in 0..=len {
                e[j] = 1.0;
                apply_bordered(&e, &mut col);
                for i in 0..=len {
                    mat[(i, j)] = col[i];
                }
                e[j] = 0.0;
            }
            let lu = mat.lu();
            let s = lu
                .solve(&DVector::from_column_slice(&full_rhs))
                .ok_or_else(|| Error::LinearSolve {
                    context: "solve_poisson".into(),
                    detail: "singular bordered system".into(),
                })?;
            s.iter().copied().collect()
        }
        2 => {
            let op = |v: &[f64], out: &mut [f64]| apply_bordered(v, out);
            let x0 = vec![0.0; len + 1];
            bicgstab(&op, &full_rhs, &x0, 40_000, 1e-12).map_err(|detail| Error::LinearSolve {
                context: "solve_poisson (n=2)".into(),
                detail,
            })?
        }
        d => {
            return Err(Error::dim(format!(
                "numeric cell solver supports n in {{1,2}}, got {d}"
            )))
        }
    };

    let phi = sol[..len].to_vec();
    let lambda = sol[len];
    // lambda absorbs any residual centering defect of the discretized rhs; a
    // large multiplier signals an inconsistent system.
    if lambda.abs() > 1e-6 * scale {
        return Err(Error::LinearSolve {
            context: "solve_poisson".into(),
            detail: format!("centering multiplier {lambda:.3e} too large"),
        });
    }
    Ok(phi)
}

/// grad_y log rho by central differences of log rho (numeric backend).
pub fn grad_log_rho_fd(grid: &FastGrid, rho: &[f64]) -> Vec<Vec<f64>> {
    let logr: Vec<f64> = rho.iter().map(|r| r.ln()).collect();
    (0..grid.dim()).map(|ax| deriv1(grid, &logr, ax)).collect()
}

// ---------------------------------------------------------------------------
// Analytic OU backend: c = K (y - nu), alpha constant in y.
// ---------------------------------------------------------------------------

type MatXt = Arc<dyn Fn(&[f64], f64) -> DMatrix<f64> + Send + Sync>;
type VecXt = Arc<dyn Fn(&[f64], f64) -> DVector<f64> + Send + Sync>;

/// Declares that the fast drift is linear, c(x,y,t) = K(x,t)(y - nu(x,t)),
/// with K Hurwitz and alpha independent of y.  Then rho is Gaussian with
/// covariance from the Lyapunov equation K S + S K' + alpha = 0, and Poisson
/// correctors with affine right-hand sides are affine.
#[derive(Clone)]
pub struct AnalyticOuSpec {
    pub kmat: MatXt,
    pub nu: VecXt,
}

/// Gaussian cell density at a frozen (x, t): rho = N(nu, cov).
#[derive(Clone, Debug)]
pub struct GaussianCell {
    pub nu: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub prec: DMatrix<f64>,
    pub log_norm: f64,
}

impl GaussianCell {
    pub fn log_density(&self, y: &[f64]) -> f64 {
        let d = DVector::from_column_slice(y) - &self.nu;
        -0.5 * (&self.prec * &d).dot(&d) + self.log_norm
    }

    pub fn density(&self, y: &[f64]) -> f64 {
        self.log_density(y).exp()
    }

    pub fn grad_log_density(&self, y: &[f64]) -> DVector<f64> {
        let d = DVector::from_column_slice(y) - &self.nu;
        -(&self.prec * d)
    }
}

/// Solve the Lyapunov equation K S + S K' = -alpha for S (vectorized dense).
pub fn solve_lyapunov(k: &DMatrix<f64>, alpha: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = k.nrows();
    let mut big = DMatrix::zeros(n * n, n * n);
    // vec_col(K S) = (I (x) K) vec_col(S); vec_col(S K') = (K (x) I) vec_col(S).
    for i in 0..n {
        for j in 0..n {
            for l in 0..n {
                // (I (x) K): block j, entry (i,l) within block
                big[(j * n + i, j * n + l)] += k[(i, l)];
                // (K (x) I): couples column blocks
                big[(j * n + i, l * n + i)] += k[(j, l)];
            }
        }
    }
    let rhs = DVector::from_iterator(n * n, (0..n * n).map(|q| -alpha[(q % n, q / n)]));
    let sol = big.lu().solve(&rhs).ok_or_else(|| Error::LinearSolve {
        context: "solve_lyapunov".into(),
        detail: "singular Kronecker system (K not Hurwitz?)".into(),
    })?;
    let mut s = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in 0..n {
            s[(i, j)] = sol[j * n + i];
        }
    }
    // Symmetrize against roundoff.
    let st = s.transpose();
    Ok((s + st) * 0.5)
}

/// Exact Gaussian cell density at (x, t).
pub fn analytic_cell_density(
    spec: &AnalyticOuSpec,
    coeffs: &CoefficientSet,
    x: &[f64],
    t: f64,
) -> Result<GaussianCell> {
    let nu = (spec.nu)(x, t);
    let k = (spec.kmat)(x, t);
    let nu_slice: Vec<f64> = nu.iter().copied().collect();
    let alpha = coeffs.alpha(x, &nu_slice, t);
    let cov = solve_lyapunov(&k, &alpha)?;
    let n = cov.nrows();
    let chol = cov.clone().cholesky().ok_or_else(|| Error::LinearSolve {
        context: "analytic_cell_density".into(),
        detail: "stationary covariance not SPD".into(),
    })?;
    let log_det = 2.0 * (0..n).map(|i| chol.l()[(i, i)].ln()).sum::<f64>();
    let prec = chol.inverse();
    let log_norm = -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);
    Ok(GaussianCell {
        nu,
        cov,
        prec,
        log_norm,
    })
}

/// Solve -L0 phi = rhs analytically for affine rhs(y) = R (y - nu) + r0.
/// Returns the coefficient pair (P, p0) of phi = P (y - nu) + p0 with
/// p0 = 0 (centering is automatic for affine phi under a Gaussian rho).
/// The Jacobian R is extracted by central differences at nu (exact for
/// affine fields); a nonzero r0 violates centering and errors.
pub fn analytic_poisson_affine(
    spec: &AnalyticOuSpec,
    x: &[f64],
    t: f64,
    rhs: &dyn Fn(&[f64]) -> DVector<f64>,
) -> Result<DMatrix<f64>> {
    let nu = (spec.nu)(x, t);
    let k = (spec.kmat)(x, t);
    let n = nu.len();
    let nu_s: Vec<f64> = nu.iter().copied().collect();
    let r0 = rhs(&nu_s);
    let mdim = r0.len();
    let scale = r0.amax().max(1.0);
    // Centering: for affine rhs, <rhs>_rho = rhs(nu).
    if r0.amax() > 1e-8 * scale.max(1.0) {
        return Err(Error::CenteringViolated {
            defect: r0.amax(),
            tol: 1e-8 * scale,
        });
    }
    let mut r = DMatrix::zeros(mdim, n);
    for j in 0..n {
        let h = 1e-4 * (1.0 + nu_s[j].abs());
        let mut yp = nu_s.clone();
        yp[j] += h;
        let fp = rhs(&yp);
        yp[j] = nu_s[j] - h;
        let fm = rhs(&yp);
        for i in 0..mdim {
            r[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    // phi = P(y-nu): L0 phi_i = P_i K (y-nu), so -P K = R, P = -R K^{-1}.
    let kinv = k.clone().lu().try_inverse().ok_or_else(|| Error::LinearSolve {
        context: "analytic_poisson_affine".into(),
        detail: "K singular".into(),
    })?;
    Ok(-(r * kinv))
}

/// Build a full cell solution (rho, phi columns, grad log rho) with either
/// backend.  `phi_tilde_rhs` / `phi_m1_rhs` are optional extra Poisson solves.
pub fn build_cell(
    coeffs: &CoefficientSet,
    analytic: Option<&AnalyticOuSpec>,
    x: &[f64],
    t: f64,
    grid: &FastGrid,
    phi_tilde_rhs: Option<&VecField>,
    phi_m1_rhs: Option<&dyn Fn(&[f64]) -> f64>,
) -> Result<CellSolution> {
    let len = grid.len();
    let m = coeffs.m;
    match analytic {
        Some(spec) => {
            let cellg = analytic_cell_density(spec, coeffs, x, t)?;
            let mut rho = vec![0.0; len];
            for idx in 0..len {
                rho[idx] = cellg.density(&grid.node(idx));
            }
            // Normalize on the truncated grid so quadrature(rho) = 1 exactly.
            let mass = grid.quadrature(&rho);
            for r in rho.iter_mut() {
                *r /= mass;
            }
            let nu_s: Vec<f64> = cellg.nu.iter().copied().collect();
            let _ = nu_s;
            let ffield = coeffs.f.clone();
            let xo = x.to_vec();
            let p = analytic_poisson_affine(spec, x, t, &move |y| ffield.eval(&xo, y, t))?;
            let nu = (spec.nu)(x, t);
            let eval_affine = |pmat: &DMatrix<f64>, idx: usize, row: usize| {
                let y = grid.node(idx);
                (0..grid.dim())
                    .map(|j| pmat[(row, j)] * (y[j] - nu[j]))
                    .sum::<f64>()
            };
            let phi: Vec<Vec<f64>> = (0..m)
                .map(|i| (0..len).map(|idx| eval_affine(&p, idx, i)).collect())
                .collect();
            let phi_tilde = match phi_tilde_rhs {
                Some(ft) => {
                    let ft = ft.clone();
                    let xo = x.to_vec();
                    let pt = analytic_poisson_affine(spec, x, t, &move |y| ft.eval(&xo, y, t))?;
                    Some(
                        (0..m)
                            .map(|i| (0..len).map(|idx| eval_affine(&pt, idx, i)).collect())
                            .collect(),
                    )
                }
                None => None,
            };
            let phi_m1 = match phi_m1_rhs {
                Some(fm1) => {
                    let pm = analytic_poisson_affine(spec, x, t, &move |y| {
                        DVector::from_element(1, fm1(y))
                    })?;
                    Some((0..len).map(|idx| eval_affine(&pm, idx, 0)).collect())
                }
                None => None,
            };
            let grad_log_rho: Vec<Vec<f64>> = (0..grid.dim())
                .map(|ax| {
                    (0..len)
                        .map(|idx| cellg.grad_log_density(&grid.node(idx))[ax])
                        .collect()
                })
                .collect();
            Ok(CellSolution {
                x: x.to_vec(),
                t,
                grid: grid.clone(),
                rho,
                phi,
                phi_tilde,
                phi_m1,
                grad_log_rho,
                backend: CellBackend::AnalyticOu,
            })
        }
        None => {
            let rho = solve_pseudo_stationary(coeffs, x, t, grid)?;
            let mut phi = Vec::with_capacity(m);
            let mut fcol = vec![0.0; m];
            for i in 0..m {
                let rhs: Vec<f64> = (0..len)
                    .map(|idx| {
                        let y = grid.node(idx);
                        coeffs.f.eval_into(x, &y, t, &mut fcol);
                        fcol[i]
                    })
                    .collect();
                phi.push(solve_poisson(coeffs, x, t, grid, &rho, &rhs)?);
            }
            let phi_tilde = match phi_tilde_rhs {
                Some(ft) => {
                    let mut cols = Vec::with_capacity(m);
                    let mut buf = vec![0.0; m];
                    for i in 0..m {
                        let rhs: Vec<f64> = (0..len)
                            .map(|idx| {
                                let y = grid.node(idx);
                                ft.eval_into(x, &y, t, &mut buf);
                                buf[i]
                            })
                            .collect();
                        cols.push(solve_poisson(coeffs, x, t, grid, &rho, &rhs)?);
                    }
                    Some(cols)
                }
                None => None,
            };
            let phi_m1 = match phi_m1_rhs {
                Some(fm1) => {
                    let rhs: Vec<f64> = (0..len).map(|idx| fm1(&grid.node(idx))).collect();
                    Some(solve_poisson(coeffs, x, t, grid, &rho, &rhs)?)
                }
                None => None,
            };
            let grad_log_rho = grad_log_rho_fd(grid, &rho);
            Ok(CellSolution {
                x: x.to_vec(),
                t,
                grid: grid.clone(),
                rho,
                phi,
                phi_tilde,
                phi_m1,
                grad_log_rho,
                backend: CellBackend::NumericFd,
            })
        }
    }
}

// ---------------------------------------------------------------------------
// BiCGStab (matrix-free, unpreconditioned) for the n=2 solves.
// ---------------------------------------------------------------------------

fn bicgstab<F>(
    op: &F,
    rhs: &[f64],
    x0: &[f64],
    max_iter: usize,
    rtol: f64,
) -> std::result::Result<Vec<f64>, String>
where
    F: Fn(&[f64], &mut [f64]),
{
    let n = rhs.len();
    let mut x = x0.to_vec();
    let mut ax = vec![0.0; n];
    op(&x, &mut ax);
    let mut r: Vec<f64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let r0: Vec<f64> = r.clone();
    let bnorm = rhs.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
    let mut rho_prev = 1.0;
    let mut alpha = 1.0;
    let mut omega = 1.0;
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut t = vec![0.0; n];
    for it in 0..max_iter {
        let rho: f64 = r0.iter().zip(&r).map(|(a, b)| a * b).sum();
        if rho.abs() < 1e-300 {
            return Err(format!("BiCGStab breakdown (rho) at iter {it}"));
        }
        let beta = (rho / rho_prev) * (alpha / omega);
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        op(&p, &mut v);
        let r0v: f64 = r0.iter().zip(&v).map(|(a, b)| a * b).sum();
        if r0v.abs() < 1e-300 {
            return Err(format!("BiCGStab breakdown (r0v) at iter {it}"));
        }
        alpha = rho / r0v;
        for i in 0..n {
            s[i] = r[i] - alpha * v[i];
        }
        let snorm = s.iter().map(|z| z * z).sum::<f64>().sqrt();
        if snorm / bnorm < rtol {
            for i in 0..n {
                x[i] += alpha * p[i];
            }
            return Ok(x);
        }
        op(&s, &mut t);
        let tt: f64 = t.iter().map(|z| z * z).sum();
        if tt < 1e-300 {
            return Err(format!("BiCGStab breakdown (t) at iter {it}"));
        }
        omega = t.iter().zip(&s).map(|(a, b)| a * b).sum::<f64>() / tt;
        for i in 0..n {
            x[i] += alpha * p[i] + omega * s[i];
            r[i] = s[i] - omega * t[i];
        }
        let rnorm = r.iter().map(|z| z * z).sum::<f64>().sqrt();
        if rnorm / bnorm < rtol {
            return Ok(x);
        }
        rho_prev = rho;
    }
    // Accept if we got close; otherwise report the stall.
    let mut axf = vec![0.0; n];
    op(&x, &mut axf);
    let rn = rhs
        .iter()
        .zip(&axf)
        .map(|(b, a)| (b - a) * (b - a))
        .sum::<f64>()
        .sqrt();
    if rn / bnorm < 1e-8 {
        Ok(x)
    } else {
        Err(format!(
            "BiCGStab stalled: relative residual {:.3e} after {} iterations",
            rn / bnorm,
            max_iter
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog;
    use crate::field::{MatField, VecField};

    fn grid_257() -> FastGrid {
        FastGrid::new(vec![-8.0], vec![8.0], 257)
    }

    fn std_normal(y: f64) -> f64 {
        (-0.5 * y * y).exp() / (2.0 * std::f64::consts::PI).sqrt()
    }

    #[test]
    fn analytic_ou_density_is_standard_normal() {
        let model = catalog::ou(1.0);
        let grid = grid_257();
        let sol = build_cell(
            &model.coeffs,
            model.analytic_cell.as_ref(),
            &[0.3],
            0.0,
            &grid,
            None,
            None,
        )
        .unwrap();
        sol.check_invariants().unwrap();
        assert!((sol.mass() - 1.0).abs() < 1e-10);
        for idx in 0..grid.len() {
            let y = grid.node(idx)[0];
            assert!((sol.rho[idx] - std_normal(y)).abs() < 1e-10, "at y = {y}");
        }
    }

    #[test]
    fn fd_density_matches_analytic_ou_at_second_order() {
        let model = catalog::ou(1.0);
        let mut errs = Vec::new();
        for nodes in [257, 513] {
            let grid = FastGrid::new(vec![-8.0], vec![8.0], nodes);
            let sol = build_cell(&model.coeffs, None, &[0.0], 0.0, &grid, None, None).unwrap();
            sol.check_invariants().unwrap();
            let max_abs = (0..grid.len())
                .map(|i| (sol.rho[i] - std_normal(grid.node(i)[0])).abs())
                .fold(0.0f64, f64::max)
;
            errs.push(max_abs);
        }
        assert!(errs[1] < 3e-5, "fine-grid error {}", errs[1]);
        let rate = errs[0] / errs[1];
        assert!((3.0..5.5).contains(&rate), "convergence rate factor {rate}");
    }

    #[test]
    fn poisson_corrector_is_y_over_gamma() {
        // -L0 phi = f = y with c = -gamma y has phi = y/gamma.
        let gamma = 2.0;
        let model = catalog::ou(gamma);
        let grid = grid_257();
        for analytic in [true, false] {
            let sol = build_cell(
                &model.coeffs,
                if analytic { model.analytic_cell.as_ref() } else { None },
                &[0.0],
                0.0,
                &grid,
                None,
                None,
            )
            .unwrap();
            let tol = if analytic { 1e-10 } else { 2e-4 };
            for idx in 0..grid.len() {
                let y = grid.node(idx)[0];
                if y.abs() < 5.0 {
                    assert!(
                        (sol.phi[0][idx] - y / gamma).abs() < tol,
                        "analytic={analytic} phi({y}) = {}",
                        sol.phi[0][idx]
                    );
                }
            }
        }
    }

    #[test]
    fn generator_acts_correctly_on_monomials() {
        // For c = -y, alpha = 2: L0 y = -y and L0 y^2 = -2 y^2 + 2.
        let model = catalog::ou(1.0);
        let grid = grid_257();
        let u1: Vec<f64> = (0..grid.len()).map(|i| grid.node(i)[0]).collect();
        let u2: Vec<f64> = u1.iter().map(|y| y * y).collect();
        let l1 = apply_l0(&model.coeffs, &[0.0], 0.0, &grid, &u1);
        let l2 = apply_l0(&model.coeffs, &[0.0], 0.0, &grid, &u2);
        for idx in 1..grid.len() - 1 {
            let y = grid.node(idx)[0];
            assert!((l1[idx] + y).abs() < 1e-8, "L0 y at {y}: {}", l1[idx]);
            assert!(
                (l2[idx] - (-2.0 * y * y + 2.0)).abs() < 1e-6,
                "L0 y^2 at {y}: {}",
                l2[idx]
            );
        }
    }

    #[test]
    fn double_well_density_matches_gibbs_form() {
        // c = -V'(y) with V = y^4/4 - y^2/2 and alpha = 2 gives rho ~ e^{-V}.
        let coeffs = CoefficientSet {
            m: 1,
            n: 1,
            p: 1,
            b: VecField::zeros(1),
            f: VecField::zeros(1),
            g: VecField::zeros(1),
            c: VecField::new(1, |_, y, _, out| out[0] = y[0] - y[0] * y[0] * y[0]),
            sigma: MatField::constant(1, 1, vec![0.0]),
            eta: MatField::constant(1, 1, vec![2f64.sqrt()]),
        };
        let grid = FastGrid::new(vec![-3.0], vec![3.0], 385);
        let rho = solve_pseudo_stationary(&coeffs, &[0.0], 0.0, &grid).unwrap();
        let unnorm: Vec<f64> = (0..grid.len())
            .map(|i| {
                let y = grid.node(i)[0];
                (-(0.25 * y.powi(4) - 0.5 * y * y)).exp()
            })
            .collect();
        let z = grid.quadrature(&unnorm);
        for idx in 0..grid.len() {
            let y = grid.node(idx)[0];
            if y.abs() < 3.0 {
                assert!(
                    (rho[idx] - unnorm[idx] / z).abs() < 2e-4,
                    "rho({y}) = {} vs {}",
                    rho[idx],
                    unnorm[idx] / z
                );
            }
        }
    }

    #[test]
    fn lyapunov_solver_recovers_known_solutions() {
        // K = -I, Q = 2I: C = I.
        let k = DMatrix::from_diagonal_element(3, 3, -1.0);
        let q = DMatrix::from_diagonal_element(3, 3, 2.0);
        let c = solve_lyapunov(&k, &q).unwrap();
        assert!((c - DMatrix::identity(3, 3)).amax() < 1e-12);
        // Non-normal stable K: verify the residual K C + C K' + Q = 0.
        let k = DMatrix::from_row_slice(2, 2, &[-1.0, 0.8, -0.3, -2.0]);
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 2.0]);
        let c = solve_lyapunov(&k, &q).unwrap();
        let resid = &k * &c + &c * k.transpose() + &q;
        assert!(resid.amax() < 1e-12);
    }

    #[test]
    fn gaussian_cell_density_normalizes() {
        let model = catalog::ou(1.5);
        let gc = analytic_cell_density(model.analytic_cell.as_ref().unwrap(), &model.coeffs, &[0.0], 0.0)
            .unwrap();
        // K = -1.5, alpha = 3: stationary variance = 1.
        assert!((gc.cov[(0, 0)] - 1.0).abs() < 1e-12);
        let grid = grid_257();
        let vals: Vec<f64> = (0..grid.len()).map(|i| gc.density(&grid.node(i))).collect();
        assert!((grid.quadrature(&vals) - 1.0).abs() < 1e-8);
        let g = gc.grad_log_density(&[0.7]);
        assert!((g[0] + 0.7).abs() < 1e-12);
    }
}
