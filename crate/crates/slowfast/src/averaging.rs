//! Averaged (reduced) coefficients and extended-system coefficients.
//!
//! For each frozen (x, t) the reduced drift/diffusion are rho-averages of the
//! cell solutions:
//!   w^i = <b^i + dphi^i/dx_j f^j + dphi^i/dy_j g^j + d^2phi^i/dx_j dy_k h^{jk}>_rho
//!   A^{ij} = <a^{ij} + phi^i f^j + phi^j f^i + dphi^i/dy_k h^{jk} + dphi^j/dy_k h^{ik}>_rho
//! with hatted/tilded variants for comparable processes.
//!
//! The extended systems append the functional coordinate (row m+1):
//! forward, with u = (b - b_hat; g - g_hat) and M = [[a, h], [h', alpha]]:
//!   bar_w^{m+1} = <u' M^+ u>_rho / 2,
//!   bar_A^{m+1,j} = <(b-b_hat)^j + dphi^j/dy_k (g-g_hat)^k>_rho,
//!   bar_A^{m+1,m+1} = <u' M^+ u>_rho;
//! backward, with v = (b + b_tilde - div_x a - a grad_x log rho;
//!                    g + g_tilde - div_x h' - h' grad_x log rho):
//!   sigma^{m+1} = (M^+ v)' Sigma_0, plus the drift pieces b^{m+1}, f^{m+1}
//!   and the corrector phi^{m+1} solving -L0 phi^{m+1} = f^{m+1}.
//!
//! Writing the quadratic forms through the unscaled M instead of the
//! eps-scaled D makes every extended coefficient eps-free by construction;
//! the eps-scaled ("unreduced") forms are kept for cross-checks.

use crate::cell::{self, CellSolution, FastGrid};
use crate::density::{GaussianState, LinearSde};
use crate::error::Error;
use crate::field::VecField;
use crate::model::{
    div_x_of_a, div_x_of_h_transpose, ComparableSpec, CoefficientSet, Side,
};
use crate::Result;
use nalgebra::{DMatrix, DVector};
use std::collections::HashMap;
use std::sync::{Arc, RwLock};

// ---------------------------------------------------------------------------
// Cell bank: cached cell solves keyed by (x, t).
// ---------------------------------------------------------------------------

/// Relative x-step for finite differences across neighbouring cell solves.
pub fn x_step(analytic: bool, x: f64) -> f64 {
    let rel = if analytic { 1e-3 } else { 1e-2 };
    rel * (1.0 + x.abs())
}

type CellKey = (Vec<u64>, u64);

fn cell_key(x: &[f64], t: f64) -> CellKey {
    (x.iter().map(|v| v.to_bits()).collect(), t.to_bits())
}

/// Cached access to cell solutions at arbitrary (x, t).
pub struct CellBank {
    pub coeffs: CoefficientSet,
    pub analytic: Option<crate::cell::AnalyticOuSpec>,
    pub grid: FastGrid,
    /// Right-hand side for phi_tilde columns (backward comparables).
    pub f_tilde: Option<VecField>,
    cache: RwLock<HashMap<CellKey, Arc<CellSolution>>>,
}

impl CellBank {
    pub fn new(
        coeffs: CoefficientSet,
        analytic: Option<crate::cell::AnalyticOuSpec>,
        grid: FastGrid,
        f_tilde: Option<VecField>,
    ) -> Self {
        CellBank {
            coeffs,
            analytic,
            grid,
            f_tilde,
            cache: RwLock::new(HashMap::new()),
        }
    }

    pub fn is_analytic(&self) -> bool {
        self.analytic.is_some()
    }

    pub fn cell(&self, x: &[f64], t: f64) -> Result<Arc<CellSolution>> {
        let key = cell_key(x, t);
        if let Some(c) = self.cache.read().unwrap().get(&key) {
            return Ok(c.clone());
        }
        let sol = cell::build_cell(
            &self.coeffs,
            self.analytic.as_ref(),
            x,
            t,
            &self.grid,
            self.f_tilde.as_ref(),
            None,
        )?;
        let arc = Arc::new(sol);
        self.cache.write().unwrap().insert(key, arc.clone());
        Ok(arc)
    }

    /// d/dx_j log rho as a grid function, by central differences across
    /// neighbouring cell solves.
    pub fn dlog_rho_dx(&self, x: &[f64], t: f64, j: usize) -> Result<Vec<f64>> {
        let d = x_step(self.is_analytic(), x[j]);
        let mut xp = x.to_vec();
        xp[j] = x[j] + d;
        let cp = self.cell(&xp, t)?;
        xp[j] = x[j] - d;
        let cm = self.cell(&xp, t)?;
        Ok((0..self.grid.len())
            .map(|i| (cp.rho[i].ln() - cm.rho[i].ln()) / (2.0 * d))
            .collect())
    }

    /// d/dt log rho as a grid function (zero for autonomous models, obtained
    /// by a small central difference in t).
    pub fn dlog_rho_dt(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let d = 1e-3;
        let cp = self.cell(x, t + d)?;
        let tm = (t - d).max(0.0);
        let cm = self.cell(x, tm)?;
        let span = t + d - tm;
        Ok((0..self.grid.len())
            .map(|i| (cp.rho[i].ln() - cm.rho[i].ln()) / span)
            .collect())
    }
}

/// Which corrector column to differentiate.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Col {
    Phi(usize),
    PhiTilde(usize),
}

fn col<'a>(cell: &'a CellSolution, which: Col) -> &'a [f64] {
    match which {
        Col::Phi(i) => &cell.phi[i],
        Col::PhiTilde(i) => cell
            .phi_tilde
            .as_ref()
            .expect("phi_tilde requested but not solved")[i]
            .as_slice(),
    }
}

/// First derivative of a grid function along fast axis `ax` (second order).
pub fn dgrid_dy(grid: &FastGrid, u: &[f64], ax: usize) -> Vec<f64> {
    // Reuse the cell module's stencils through apply_l0-compatible behavior:
    // central interior, one-sided second-order at the boundary.
    let h = grid.spacing[ax];
    let nn = grid.shape[ax];
    let mut out = vec![0.0; u.len()];
    for idx in 0..u.len() {
        let mi = grid.unravel(idx);
        let i = mi[ax];
        let at = |k: usize| {
            let mut m2 = mi.clone();
            m2[ax] = k;
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

/// Cluster of cell solutions around a slow point: center plus x +- delta e_j.
pub struct CellCluster {
    pub x: Vec<f64>,
    pub t: f64,
    pub center: Arc<CellSolution>,
    pub plus: Vec<Arc<CellSolution>>,
    pub minus: Vec<Arc<CellSolution>>,
    pub delta: Vec<f64>,
}

impl CellCluster {
    pub fn build(bank: &CellBank, x: &[f64], t: f64) -> Result<Self> {
        let center = bank.cell(x, t)?;
        let m = x.len();
        let mut plus = Vec::with_capacity(m);
        let mut minus = Vec::with_capacity(m);
        let mut delta = Vec::with_capacity(m);
        for j in 0..m {
            let d = x_step(bank.is_analytic(), x[j]);
            let mut xp = x.to_vec();
            xp[j] = x[j] + d;
            plus.push(bank.cell(&xp, t)?);
            xp[j] = x[j] - d;
            minus.push(bank.cell(&xp, t)?);
            delta.push(d);
        }
        Ok(CellCluster {
            x: x.to_vec(),
            t,
            center,
            plus,
            minus,
            delta,
        })
    }

    fn dcol_dx(&self, which: Col, j: usize) -> Vec<f64> {
        let p = col(&self.plus[j], which);
        let mm = col(&self.minus[j], which);
        p.iter()
            .zip(mm)
            .map(|(a, b)| (a - b) / (2.0 * self.delta[j]))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Pseudo-inverse with range check.
// ---------------------------------------------------------------------------

/// Solve M q = v for symmetric PSD M via SVD pseudo-inverse; errors if v has a
/// component outside the range of M (the functional would be eps-divergent or
/// undefined there).
pub fn pinv_apply(mmat: &DMatrix<f64>, v: &DVector<f64>, context: &str) -> Result<DVector<f64>> {
    let svd = mmat.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let cutoff = smax * 1e-12;
    let u = svd.u.as_ref().unwrap();
    let vt = svd.v_t.as_ref().unwrap();
    let mut q = DVector::zeros(v.len());
    for k in 0..svd.singular_values.len() {
        let s = svd.singular_values[k];
        if s > cutoff {
            let uk = u.column(k);
            let coef = uk.dot(v) / s;
            q += vt.row(k).transpose() * coef;
        }
    }
    let resid = (mmat * &q - v).norm();
    if resid > 1e-8 * v.norm().max(1.0) {
        return Err(Error::SingularDiffusion {
            context: format!("{context}: weighted vector outside range of the diffusion block"),
            rcond: if smax > 0.0 {
                svd.singular_values.min() / smax
            } else {
                0.0
            },
        });
    }
    Ok(q)
}

// ---------------------------------------------------------------------------
// Lemma 2.1 quadratures.
// ---------------------------------------------------------------------------

struct DriftFields {
    /// slow drift entering the w-integrand (b, b_hat or b_tilde), as grid rows
    bvals: Vec<Vec<f64>>, // [component][node]
    /// fast drift entering the dphi/dy term (g, g_hat or g_tilde)
    gvals: Vec<Vec<f64>>,
    /// fast->slow coupling entering the dphi/dx term: f for the original and
    /// forward comparables (which share f), f_tilde for backward comparables
    fvals: Vec<Vec<f64>>,
    which: Col,
}

fn field_rows(field: &VecField, x: &[f64], t: f64, grid: &FastGrid) -> Vec<Vec<f64>> {
    let d = field.dim();
    let mut rows = vec![vec![0.0; grid.len()]; d];
    let mut buf = vec![0.0; d];
    for idx in 0..grid.len() {
        let y = grid.node(idx);
        field.eval_into(x, &y, t, &mut buf);
        for i in 0..d {
            rows[i][idx] = buf[i];
        }
    }
    rows
}

/// w-type quadrature for slow component `i` with corrector column `which`:
///   <bvals_i + dphi/dx_j f^j + dphi/dy_j gvals_j + d2phi/dx_j dy_k h^{jk}>_rho
fn w_component(
    cluster: &CellCluster,
    coeffs: &CoefficientSet,
    fields: &DriftFields,
    i: usize,
) -> f64 {
    let grid = &cluster.center.grid;
    let cell = &cluster.center;
    let m = coeffs.m;
    let n = coeffs.n;
    let which = match fields.which {
        Col::Phi(_) => Col::Phi(i),
        Col::PhiTilde(_) => Col::PhiTilde(i),
    };
    let frow = &fields.fvals;
    let dphidx: Vec<Vec<f64>> = (0..m).map(|j| cluster.dcol_dx(which, j)).collect();
    let dphidy: Vec<Vec<f64>> = (0..n).map(|ax| dgrid_dy(grid, col(cell, which), ax)).collect();
    // d2 phi / dx_j dy_k: differentiate the x-difference along y.
    let d2: Vec<Vec<Vec<f64>>> = (0..m)
        .map(|j| (0..n).map(|k| dgrid_dy(grid, &dphidx[j], k)).collect())
        .collect();
    let mut total = 0.0;
    for idx in 0..grid.len() {
        let y = grid.node(idx);
        let h = coeffs.h(&cluster.x, &y, cluster.t);
        let mut v = fields.bvals[i][idx];
        for j in 0..m {
            v += dphidx[j][idx] * frow[j][idx];
        }
        for j in 0..n {
            v += dphidy[j][idx] * fields.gvals[j][idx];
        }
        for j in 0..m {
            for k in 0..n {
                v += d2[j][k][idx] * h[(j, k)];
            }
        }
        total += grid.weight(idx) * cell.rho[idx] * v;
    }
    total
}

/// A-type quadrature with corrector column family `which` and the f-field that
/// sourced it:
///   A^{ij} = <a^{ij} + phi^i fsrc^j + phi^j fsrc^i
///            + dphi^i/dy_k h^{jk} + dphi^j/dy_k h^{ik}>_rho
fn a_matrix(
    cluster: &CellCluster,
    coeffs: &CoefficientSet,
    which_family: fn(usize) -> Col,
    fsrc: &VecField,
) -> DMatrix<f64> {
    let grid = &cluster.center.grid;
    let cell = &cluster.center;
    let m = coeffs.m;
    let n = coeffs.n;
    let frow = field_rows(fsrc, &cluster.x, cluster.t, grid);
    let dphidy: Vec<Vec<Vec<f64>>> = (0..m)
        .map(|i| {
            (0..n)
                .map(|ax| dgrid_dy(grid, col(cell, which_family(i)), ax))
                .collect()
        })
        .collect();
    let mut out = DMatrix::zeros(m, m);
    for idx in 0..grid.len() {
        let y = grid.node(idx);
        let a = coeffs.a(&cluster.x, &y, cluster.t);
        let h = coeffs.h(&cluster.x, &y, cluster.t);
        let wrho = grid.weight(idx) * cell.rho[idx];
        for i in 0..m {
            let phi_i = col(cell, which_family(i))[idx];
            for j in 0..m {
                let phi_j = col(cell, which_family(j))[idx];
                let mut v = a[(i, j)] + phi_i * frow[j][idx] + phi_j * frow[i][idx];
                for k in 0..n {
                    v += dphidy[i][k][idx] * h[(j, k)] + dphidy[j][k][idx] * h[(i, k)];
                }
                out[(i, j)] += wrho * v;
            }
        }
    }
    // Symmetrize roundoff.
    let t = out.transpose();
    (out + t) * 0.5
}

/// Averaged coefficients at one (x, t).
#[derive(Clone, Debug)]
pub struct AvgPoint {
    pub w: DVector<f64>,
    pub a: DMatrix<f64>,
    /// w_hat (forward comparable) or w_tilde (backward comparable).
    pub w2: Option<DVector<f64>>,
    /// A_tilde for backward comparables.
    pub a_tilde: Option<DMatrix<f64>>,
}

/// Lemma 2.1 quadratures (plus comparable variants) at a single (x, t).
pub fn averaged_at(
    bank: &CellBank,
    comparable: Option<&ComparableSpec>,
    x: &[f64],
    t: f64,
) -> Result<AvgPoint> {
    let coeffs = &bank.coeffs;
    let cluster = CellCluster::build(bank, x, t)?;
    let grid = &bank.grid;
    let m = coeffs.m;

    let fields = DriftFields {
        bvals: field_rows(&coeffs.b, x, t, grid),
        gvals: field_rows(&coeffs.g, x, t, grid),
        fvals: field_rows(&coeffs.f, x, t, grid),
        which: Col::Phi(0),
    };
    let w = DVector::from_iterator(m, (0..m).map(|i| w_component(&cluster, coeffs, &fields, i)));
    let a = a_matrix(&cluster, coeffs, Col::Phi, &coeffs.f);

    let mut w2 = None;
    let mut a_tilde = None;
    if let Some(cmp) = comparable {
        cmp.validate(coeffs)?;
        match cmp.side {
            Side::Forward => {
                // w_hat: same corrector phi (comparable shares f), hatted drifts.
                let fields2 = DriftFields {
                    bvals: field_rows(&cmp.b2, x, t, grid),
                    gvals: field_rows(&cmp.g2, x, t, grid),
                    fvals: field_rows(&coeffs.f, x, t, grid),
                    which: Col::Phi(0),
                };
                w2 = Some(DVector::from_iterator(
                    m,
                    (0..m).map(|i| w_component(&cluster, coeffs, &fields2, i)),
                ));
            }
            Side::Backward => {
                // w_tilde, A_tilde use phi_tilde (corrector of f_tilde).
                if cluster.center.phi_tilde.is_none() {
                    return Err(Error::LinearSolve {
                        context: "averaged_at".into(),
                        detail: "backward comparable requires phi_tilde in the cell bank".into(),
                    });
                }
                let fields2 = DriftFields {
                    bvals: field_rows(&cmp.b2, x, t, grid),
                    gvals: field_rows(&cmp.g2, x, t, grid),
                    fvals: field_rows(cmp.f2.as_ref().unwrap(), x, t, grid),
                    which: Col::PhiTilde(0),
                };
                w2 = Some(DVector::from_iterator(
                    m,
                    (0..m).map(|i| w_component(&cluster, coeffs, &fields2, i)),
                ));
                a_tilde = Some(a_matrix(
                    &cluster,
                    coeffs,
                    Col::PhiTilde,
                    cmp.f2.as_ref().unwrap(),
                ));
            }
        }
    }
    Ok(AvgPoint { w, a, w2, a_tilde })
}

// ---------------------------------------------------------------------------
// Forward extended system.
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct ForwardExtPoint {
    pub bar_w_m1: f64,
    pub bar_a_m1x: DVector<f64>,
    pub bar_a_m1m1: f64,
    /// |bar_A^{m+1,m+1} - 2 bar_w^{m+1}|
    pub resid_double: f64,
    /// |bar_A^{m+1,x} - (w - w_hat)|_inf
    pub resid_row: f64,
}

pub fn extended_forward_at(
    bank: &CellBank,
    comparable: &ComparableSpec,
    x: &[f64],
    t: f64,
) -> Result<ForwardExtPoint> {
    assert_eq!(comparable.side, Side::Forward);
    let coeffs = &bank.coeffs;
    let cluster = CellCluster::build(bank, x, t)?;
    let cell = &cluster.center;
    let grid = &bank.grid;
    let (m, n) = (coeffs.m, coeffs.n);

    let db = coeffs.b.sub(&comparable.b2);
    let dg = coeffs.g.sub(&comparable.g2);
    let db_rows = field_rows(&db, x, t, grid);
    let dg_rows = field_rows(&dg, x, t, grid);

    let mut bar_w_m1 = 0.0;
    let mut bar_a_m1m1 = 0.0;
    let mut bar_a_m1x = DVector::zeros(m);
    let dphidy: Vec<Vec<Vec<f64>>> = (0..m)
        .map(|i| (0..n).map(|ax| dgrid_dy(grid, &cell.phi[i], ax)).collect())
        .collect();

    for idx in 0..grid.len() {
        let y = grid.node(idx);
        let mmat = coeffs.joint_diffusion_unscaled(x, &y, t);
        let mut u = DVector::zeros(m + n);
        for i in 0..m {
            u[i] = db_rows[i][idx];
        }
        for i in 0..n {
            u[m + i] = dg_rows[i][idx];
        }
        let q = pinv_apply(&mmat, &u, "extended_forward")?;
        let quad = q.dot(&u);
        let wrho = grid.weight(idx) * cell.rho[idx];
        bar_w_m1 += wrho * 0.5 * quad;
        bar_a_m1m1 += wrho * quad;
        for j in 0..m {
            let mut v = db_rows[j][idx];
            for k in 0..n {
                v += dphidy[j][k][idx] * dg_rows[k][idx];
            }
            bar_a_m1x[j] += wrho * v;
        }
    }

    // Residuals against the averaged coefficients.
    let avg = averaged_at(bank, Some(comparable), x, t)?;
    let w_hat = avg.w2.expect("forward comparable yields w_hat");
    let resid_double = (bar_a_m1m1 - 2.0 * bar_w_m1).abs();
    let resid_row = (&bar_a_m1x - (&avg.w - &w_hat)).amax();
    Ok(ForwardExtPoint {
        bar_w_m1,
        bar_a_m1x,
        bar_a_m1m1,
        resid_double,
        resid_row,
    })
}

// ---------------------------------------------------------------------------
// Backward extended system.
// ---------------------------------------------------------------------------

/// Grid functions of the backward "reduced difference" vector at a point:
/// v = (b + b_tilde - div_x a - a grad_x log rho;
///      g + g_tilde - div_x h' - h' grad_x log rho).
fn backward_v_rows(
    bank: &CellBank,
    comparable: &ComparableSpec,
    x: &[f64],
    t: f64,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let coeffs = &bank.coeffs;
    let grid = &bank.grid;
    let (m, n) = (coeffs.m, coeffs.n);
    let b_rows = field_rows(&coeffs.b, x, t, grid);
    let bt_rows = field_rows(&comparable.b2, x, t, grid);
    let g_rows = field_rows(&coeffs.g, x, t, grid);
    let gt_rows = field_rows(&comparable.g2, x, t, grid);
    let dlr_dx: Vec<Vec<f64>> = (0..m)
        .map(|j| bank.dlog_rho_dx(x, t, j))
        .collect::<Result<_>>()?;

    let mut vs = vec![vec![0.0; grid.len()]; m];
    let mut vf = vec![vec![0.0; grid.len()]; n];
    for idx in 0..grid.len() {
        let y = grid.node(idx);
        let diva = div_x_of_a(coeffs, x, &y, t);
        let divht = div_x_of_h_transpose(coeffs, x, &y, t);
        let a = coeffs.a(x, &y, t);
        let h = coeffs.h(x, &y, t);
        for i in 0..m {
            let mut v = b_rows[i][idx] + bt_rows[i][idx] - diva[i];
            for j in 0..m {
                v -= a[(i, j)] * dlr_dx[j][idx];
            }
            vs[i][idx] = v;
        }
        for i in 0..n {
            let mut v = g_rows[i][idx] + gt_rows[i][idx] - divht[i];
            for j in 0..m {
                v -= h[(j, i)] * dlr_dx[j][idx];
            }
            vf[i][idx] = v;
        }
    }
    Ok((vs, vf))
}

/// f^{m+1} = (1/rho)[div_y(g_tilde rho) - div_x(f rho)]
///        = sum_k (d g_tilde^k/dy_k + g_tilde^k d log rho/dy_k)
///        - sum_j (d f^j/dx_j + f^j d log rho/dx_j), as a grid function.
fn f_m1_grid(
    bank: &CellBank,
    comparable: &ComparableSpec,
    x: &[f64],
    t: f64,
) -> Result<Vec<f64>> {
    let coeffs = &bank.coeffs;
    let grid = &bank.grid;
    let (m, n) = (coeffs.m, coeffs.n);
    let cell = bank.cell(x, t)?;
    let gt = &comparable.g2;
    let dlr_dx: Vec<Vec<f64>> = (0..m)
        .map(|j| bank.dlog_rho_dx(x, t, j))
        .collect::<Result<_>>()?;
    let f_rows = field_rows(&coeffs.f, x, t, grid);
    let gt_rows = field_rows(gt, x, t, grid);
    let mut out = vec![0.0; grid.len()];
    for idx in 0..grid.len() {
        let y = grid.node(idx);
        let glr = cell.grad_log_rho_at(idx);
        let mut v = 0.0;
        for k in 0..n {
            v += gt.partial_y(k, k, x, &y, t) + gt_rows[k][idx] * glr[k];
        }
        for j in 0..m {
            v -= coeffs.f.partial_x(j, j, x, &y, t) + f_rows[j][idx] * dlr_dx[j][idx];
        }
        out[idx] = v;
    }
    Ok(out)
}

/// Solve phi^{m+1} at a point (numeric Poisson solve or analytic affine).
fn solve_phi_m1(bank: &CellBank, comparable: &ComparableSpec, x: &[f64], t: f64) -> Result<Vec<f64>> {
    let rhs = f_m1_grid(bank, comparable, x, t)?;
    let cell = bank.cell(x, t)?;
    match &bank.analytic {
        Some(spec) => {
            // Affine solve against a closure that re-derives f^{m+1} at probe
            // points from the exact Gaussian densities.
            let grid = &bank.grid;
            // Probe at grid nodes is enough: reconstruct the affine map from
            // the grid values by least squares (exact for affine rhs).
            let n = grid.dim();
            let len = grid.len();
            let nu = (spec.nu)(x, t);
            // Design matrix [1, (y - nu)]
            let mut ata = DMatrix::zeros(n + 1, n + 1);
            let mut atb = DVector::zeros(n + 1);
            let mut worst = 0.0_f64;
            for idx in 0..len {
                let y = grid.node(idx);
                let mut row = DVector::zeros(n + 1);
                row[0] = 1.0;
                for j in 0..n {
                    row[j + 1] = y[j] - nu[j];
                }
                ata += &row * row.transpose();
                atb += &row * rhs[idx];
                worst = worst.max(rhs[idx].abs());
            }
            let coef = ata.lu().solve(&atb).ok_or_else(|| Error::LinearSolve {
                context: "solve_phi_m1".into(),
                detail: "degenerate affine fit".into(),
            })?;
            // Verify the rhs really is affine (analytic backend requirement).
            let mut fit_err = 0.0_f64;
            for idx in 0..len {
                let y = grid.node(idx);
                let mut v = coef[0];
                for j in 0..n {
                    v += coef[j + 1] * (y[j] - nu[j]);
                }
                fit_err = fit_err.max((v - rhs[idx]).abs());
            }
            if fit_err > 1e-6 * worst.max(1.0) {
                return Err(Error::LinearSolve {
                    context: "solve_phi_m1".into(),
                    detail: format!(
                        "f^(m+1) not affine in y (fit error {fit_err:.3e}); use the numeric backend"
                    ),
                });
            }
            if coef[0].abs() > 1e-8 * worst.max(1.0) {
                return Err(Error::CenteringViolated {
                    defect: coef[0].abs(),
                    tol: 1e-8 * worst.max(1.0),
                });
            }
            let rvec = DVector::from_iterator(n, (1..=n).map(|j| coef[j]));
            let k = (spec.kmat)(x, t);
            let kinv = k.lu().try_inverse().ok_or_else(|| Error::LinearSolve {
                context: "solve_phi_m1".into(),
                detail: "K singular".into(),
            })?;
            let p = -(rvec.transpose() * kinv);
            Ok((0..len)
                .map(|idx| {
                    let y = grid.node(idx);
                    (0..n).map(|j| p[j] * (y[j] - nu[j])).sum()
                })
                .collect())
        }
        None => cell::solve_poisson(&bank.coeffs, x, t, &bank.grid, &cell.rho, &rhs),
    }
}

#[derive(Clone, Debug)]
pub struct BackwardExtPoint {
    pub bar_w_m1: f64,
    pub bar_a_m1x: DVector<f64>,
    pub bar_a_m1m1: f64,
    /// w + w_tilde - div_x A (the G^(1) drift-difference vector).
    pub vec_g1: DVector<f64>,
    /// div_x (w_tilde - 1/2 div_x A) (the G^(1) divergence integrand).
    pub div_g1: f64,
    /// Lemma 8.8: |bar_A^{m+1,x} - (w + w_tilde - div_x A)|_inf
    pub resid_l88: f64,
    /// Lemmas 8.7+8.9: |bar_A^{m+1,m+1} - 2(bar_w^{m+1} - div_g1)|
    pub resid_l879: f64,
}

/// All backward extended-system coefficients at one (x, t).
pub fn extended_backward_at(
    bank: &CellBank,
    comparable: &ComparableSpec,
    x: &[f64],
    t: f64,
) -> Result<BackwardExtPoint> {
    assert_eq!(comparable.side, Side::Backward);
    let coeffs = &bank.coeffs;
    let grid = &bank.grid;
    let (m, n) = (coeffs.m, coeffs.n);

    // Compatibility gate: the reduced forms below silently drop the
    // eps-divergent blocks, which is only valid when A4.1/A4.2 hold.
    let cell0 = bank.cell(x, t)?;
    let ft = comparable
        .f2
        .as_ref()
        .expect("backward comparable carries f_tilde");
    let report = crate::model::check_compatible_conditions(coeffs, ft, &cell0, None)?;
    let ctol = compat_tol(bank);
    if report.a41_residual > ctol {
        return Err(Error::Incompatible {
            condition: "A4.1 (f + f_tilde = div_y h + h grad_y log rho)".into(),
            residual: report.a41_residual,
            tol: ctol,
        });
    }
    if report.a42_residual > ctol {
        return Err(Error::Incompatible {
            condition: "A4.2 (2c = div_y alpha + alpha grad_y log rho)".into(),
            residual: report.a42_residual,
            tol: ctol,
        });
    }

    let cluster = CellCluster::build(bank, x, t)?;
    let cell = &cluster.center;
    let (vs, vf) = backward_v_rows(bank, comparable, x, t)?;

    // sigma^{m+1} quadratic form and the 1/2 |sigma|^2 part of b^{m+1}.
    let mut s2 = vec![0.0; grid.len()];
    for idx in 0..grid.len() {
        let y = grid.node(idx);
        let mmat = coeffs.joint_diffusion_unscaled(x, &y, t);
        let mut v = DVector::zeros(m + n);
        for i in 0..m {
            v[i] = vs[i][idx];
        }
        for i in 0..n {
            v[m + i] = vf[i][idx];
        }
        let q = pinv_apply(&mmat, &v, "extended_backward")?;
        s2[idx] = q.dot(&v);
    }

    // b^{m+1} = 1/2 |sigma^{m+1}|^2 + (1/rho) div_x(psi rho) - d log rho/dt,
    // psi^j = b_tilde^j - 1/2 (div_x a)^j - 1/2 (a grad_x log rho)^j;
    // (1/rho) div_x(psi rho) = sum_j (d psi^j/dx_j + psi^j d log rho/dx_j).
    let psi_at = |xq: &[f64]| -> Result<Vec<Vec<f64>>> {
        // psi rows at slow point xq on the fast grid.
        let bt_rows = field_rows(&comparable.b2, xq, t, grid);
        let dlr: Vec<Vec<f64>> = (0..m)
            .map(|j| bank.dlog_rho_dx(xq, t, j))
            .collect::<Result<_>>()?;
        let mut rows = vec![vec![0.0; grid.len()]; m];
        for idx in 0..grid.len() {
            let y = grid.node(idx);
            let diva = div_x_of_a(coeffs, xq, &y, t);
            let a = coeffs.a(xq, &y, t);
            for i in 0..m {
                let mut v = bt_rows[i][idx] - 0.5 * diva[i];
                for j in 0..m {
                    v -= 0.5 * a[(i, j)] * dlr[j][idx];
                }
                rows[i][idx] = v;
            }
        }
        Ok(rows)
    };
    let psi0 = psi_at(x)?;
    let dlr_dx: Vec<Vec<f64>> = (0..m)
        .map(|j| bank.dlog_rho_dx(x, t, j))
        .collect::<Result<_>>()?;
    let dlr_dt = bank.dlog_rho_dt(x, t)?;
    let mut div_psi = vec![0.0; grid.len()];
    for j in 0..m {
        let d = x_step(bank.is_analytic(), x[j]);
        let mut xp = x.to_vec();
        xp[j] = x[j] + d;
        let pp = psi_at(&xp)?;
        xp[j] = x[j] - d;
        let pm = psi_at(&xp)?;
        for idx in 0..grid.len() {
            div_psi[idx] += (pp[j][idx] - pm[j][idx]) / (2.0 * d) + psi0[j][idx] * dlr_dx[j][idx];
        }
    }
    let b_m1: Vec<f64> = (0..grid.len())
        .map(|idx| 0.5 * s2[idx] + div_psi[idx] - dlr_dt[idx])
        .collect();

    // phi^{m+1} on the cluster (center and x +- delta for the x-derivative).
    let phi_m1_c = solve_phi_m1(bank, comparable, x, t)?;
    let f_m1 = f_m1_grid(bank, comparable, x, t)?;
    let mut dphi_m1_dx = vec![vec![0.0; grid.len()]; m];
    for j in 0..m {
        let d = cluster.delta[j];
        let mut xp = x.to_vec();
        xp[j] = x[j] + d;
        let pp = solve_phi_m1(bank, comparable, &xp, t)?;
        xp[j] = x[j] - d;
        let pm = solve_phi_m1(bank, comparable, &xp, t)?;
        for idx in 0..grid.len() {
            dphi_m1_dx[j][idx] = (pp[idx] - pm[idx]) / (2.0 * d);
        }
    }
    let dphi_m1_dy: Vec<Vec<f64>> = (0..n).map(|ax| dgrid_dy(grid, &phi_m1_c, ax)).collect();
    let d2_m1: Vec<Vec<Vec<f64>>> = (0..m)
        .map(|j| (0..n).map(|k| dgrid_dy(grid, &dphi_m1_dx[j], k)).collect())
        .collect();

    // bar_w^{m+1}: Lemma 2.1 w-formula for the extended component.
    let f_rows = field_rows(&coeffs.f, x, t, grid);
    let g_rows = field_rows(&coeffs.g, x, t, grid);
    let mut bar_w_m1 = 0.0;
    for idx in 0..grid.len() {
        let y = grid.node(idx);
        let h = coeffs.h(x, &y, t);
        let mut v = b_m1[idx];
        for j in 0..m {
            v += dphi_m1_dx[j][idx] * f_rows[j][idx];
        }
        for j in 0..n {
            v += dphi_m1_dy[j][idx] * g_rows[j][idx];
        }
        for j in 0..m {
            for k in 0..n {
                v += d2_m1[j][k][idx] * h[(j, k)];
            }
        }
        bar_w_m1 += grid.weight(idx) * cell.rho[idx] * v;
    }

    // bar_A^{m+1,j} and bar_A^{m+1,m+1}.
    let dphidy: Vec<Vec<Vec<f64>>> = (0..m)
        .map(|i| (0..n).map(|ax| dgrid_dy(grid, &cell.phi[i], ax)).collect())
        .collect();
    let mut bar_a_m1x = DVector::zeros(m);
    let mut bar_a_m1m1 = 0.0;
    for idx in 0..grid.len() {
        let y = grid.node(idx);
        let h = coeffs.h(x, &y, t);
        let wrho = grid.weight(idx) * cell.rho[idx];
        for j in 0..m {
            let mut v = vs[j][idx]
                + phi_m1_c[idx] * f_rows[j][idx]
                + cell.phi[j][idx] * f_m1[idx];
            for k in 0..n {
                v += dphi_m1_dy[k][idx] * h[(j, k)] + dphidy[j][k][idx] * vf[k][idx];
            }
            bar_a_m1x[j] += wrho * v;
        }
        let mut v = s2[idx] + 2.0 * phi_m1_c[idx] * f_m1[idx];
        for k in 0..n {
            v += 2.0 * dphi_m1_dy[k][idx] * vf[k][idx];
        }
        bar_a_m1m1 += wrho * v;
    }

    // Identity residuals need w, w_tilde, A and x-derivatives of A / w_tilde.
    let avg_fn = |xq: &[f64]| -> Result<AvgPoint> { averaged_at(bank, Some(comparable), xq, t) };
    let avg0 = avg_fn(x)?;
    let w_tilde0 = avg0.w2.clone().expect("backward comparable yields w_tilde");
    // div_x A (vector): (div_x A)^i = sum_j dA^{ij}/dx_j.
    let mut div_a = DVector::zeros(m);
    let mut avg_p = Vec::with_capacity(m);
    let mut avg_m = Vec::with_capacity(m);
    for j in 0..m {
        let d = cluster.delta[j];
        let mut xp = x.to_vec();
        xp[j] = x[j] + d;
        let ap = avg_fn(&xp)?;
        xp[j] = x[j] - d;
        let am = avg_fn(&xp)?;
        for i in 0..m {
            div_a[i] += (ap.a[(i, j)] - am.a[(i, j)]) / (2.0 * d);
        }
        avg_p.push(ap);
        avg_m.push(am);
    }
    let vec_g1 = &avg0.w + &w_tilde0 - &div_a;

    // div_x (w_tilde - 1/2 div_x A): scalar; requires div_x A at x +- delta,
    // hence averaged coefficients at second-shell points.
    let mut div_g1 = 0.0;
    for j in 0..m {
        let d = cluster.delta[j];
        let eval_inner = |xq: &[f64]| -> Result<f64> {
            // component j of (w_tilde - 1/2 div_x A) at xq
            let av = avg_fn(xq)?;
            let wt = av.w2.expect("w_tilde");
            let mut diva_j = 0.0;
            for l in 0..m {
                let dl = x_step(bank.is_analytic(), xq[l]);
                let mut xq2 = xq.to_vec();
                xq2[l] = xq[l] + dl;
                let ap = avg_fn(&xq2)?;
                xq2[l] = xq[l] - dl;
                let am = avg_fn(&xq2)?;
                diva_j += (ap.a[(j, l)] - am.a[(j, l)]) / (2.0 * dl);
            }
            Ok(wt[j] - 0.5 * diva_j)
        };
        let mut xp = x.to_vec();
        xp[j] = x[j] + d;
        let vp = eval_inner(&xp)?;
        xp[j] = x[j] - d;
        let vm = eval_inner(&xp)?;
        div_g1 += (vp - vm) / (2.0 * d);
    }

    let resid_l88 = (&bar_a_m1x - &vec_g1).amax();
    let resid_l879 = (bar_a_m1m1 - 2.0 * (bar_w_m1 - div_g1)).abs();

    Ok(BackwardExtPoint {
        bar_w_m1,
        bar_a_m1x,
        bar_a_m1m1,
        vec_g1,
        div_g1,
        resid_l88,
        resid_l879,
    })
}

/// Compatibility-residual tolerance: tight for the analytic backend, FD-level
/// for the numeric one.
pub fn compat_tol(bank: &CellBank) -> f64 {
    if bank.is_analytic() {
        1e-8
    } else {
        1e-3
    }
}

// ---------------------------------------------------------------------------
// Tables over an (x, t) grid + cubic-spline evaluation (m = 1).
// ---------------------------------------------------------------------------

/// Natural cubic spline with linear extrapolation outside the node range.
#[derive(Clone, Debug)]
pub struct Spline1 {
    xs: Vec<f64>,
    ys: Vec<f64>,
    /// Second derivatives at the nodes.
    m2: Vec<f64>,
}

impl Spline1 {
    pub fn natural(xs: Vec<f64>, ys: Vec<f64>) -> Self {
        let n = xs.len();
        assert!(n >= 2 && ys.len() == n);
        let mut m2 = vec![0.0; n];
        if n > 2 {
            // Tridiagonal solve (Thomas algorithm) for natural spline moments.
            let mut sub = vec![0.0; n];
            let mut diag = vec![0.0; n];
            let mut sup = vec![0.0; n];
            let mut rhs = vec![0.0; n];
            for i in 1..n - 1 {
                let h0 = xs[i] - xs[i - 1];
                let h1 = xs[i + 1] - xs[i];
                sub[i] = h0 / 6.0;
                diag[i] = (h0 + h1) / 3.0;
                sup[i] = h1 / 6.0;
                rhs[i] = (ys[i + 1] - ys[i]) / h1 - (ys[i] - ys[i - 1]) / h0;
            }
            for i in 2..n - 1 {
                let f = sub[i] / diag[i - 1];
                diag[i] -= f * sup[i - 1];
                rhs[i] -= f * rhs[i - 1];
            }
            for i in (1..n - 1).rev() {
                let upper = if i + 1 < n - 1 { sup[i] * m2[i + 1] } else { 0.0 };
                m2[i] = (rhs[i] - upper) / diag[i];
            }
        }
        Spline1 { xs, ys, m2 }
    }

    fn locate(&self, x: f64) -> usize {
        let n = self.xs.len();
        if x <= self.xs[0] {
            return 0;
        }
        if x >= self.xs[n - 2] {
            return n - 2;
        }
        // Uniform-ish grid: direct index then adjust.
        let mut lo = 0;
        let mut hi = n - 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.xs[mid] <= x {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.xs.len();
        // Linear extrapolation beyond the node range.
        if x < self.xs[0] {
            let d = self.deriv_at_node(0);
            return self.ys[0] + d * (x - self.xs[0]);
        }
        if x > self.xs[n - 1] {
            let d = self.deriv_at_node(n - 1);
            return self.ys[n - 1] + d * (x - self.xs[n - 1]);
        }
        let i = self.locate(x);
        let h = self.xs[i + 1] - self.xs[i];
        let a = (self.xs[i + 1] - x) / h;
        let b = (x - self.xs[i]) / h;
        a * self.ys[i]
            + b * self.ys[i + 1]
            + ((a * a * a - a) * self.m2[i] + (b * b * b - b) * self.m2[i + 1]) * h * h / 6.0
    }

    pub fn deriv(&self, x: f64) -> f64 {
        let n = self.xs.len();
        if x <= self.xs[0] {
            return self.deriv_at_node(0);
        }
        if x >= self.xs[n - 1] {
            return self.deriv_at_node(n - 1);
        }
        let i = self.locate(x);
        let h = self.xs[i + 1] - self.xs[i];
        let a = (self.xs[i + 1] - x) / h;
        let b = (x - self.xs[i]) / h;
        (self.ys[i + 1] - self.ys[i]) / h
            + ((3.0 * b * b - 1.0) * self.m2[i + 1] - (3.0 * a * a - 1.0) * self.m2[i]) * h / 6.0
    }

    fn deriv_at_node(&self, i: usize) -> f64 {
        let n = self.xs.len();
        if i == 0 {
            let h = self.xs[1] - self.xs[0];
            (self.ys[1] - self.ys[0]) / h - h * (2.0 * self.m2[0] + self.m2[1]) / 6.0
        } else {
            let h = self.xs[n - 1] - self.xs[n - 2];
            (self.ys[n - 1] - self.ys[n - 2]) / h + h * (2.0 * self.m2[n - 1] + self.m2[n - 2]) / 6.0
        }
    }
}

/// Evaluation grid over (x, t).  Multi-dimensional x is stored as explicit
/// points; spline interpolation is provided for m = 1.
#[derive(Clone, Debug)]
pub struct XtGrid {
    pub xpoints: Vec<Vec<f64>>,
    pub ts: Vec<f64>,
}

impl XtGrid {
    /// 1-D slow grid: nx nodes over [lo, hi] at the given t nodes.
    pub fn line(lo: f64, hi: f64, nx: usize, ts: Vec<f64>) -> Self {
        let xpoints = (0..nx)
            .map(|i| vec![lo + (hi - lo) * i as f64 / (nx - 1) as f64])
            .collect();
        XtGrid { xpoints, ts }
    }
}

/// Reduced pseudo-stationary density mu of the averaged dynamics.
#[derive(Clone, Debug)]
pub enum ReducedDensity {
    Gaussian(GaussianState),
    Grid1 {
        log_mu: Spline1,
    },
}

impl ReducedDensity {
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        match self {
            ReducedDensity::Gaussian(st) => st.log_density(x),
            ReducedDensity::Grid1 { log_mu } => Ok(log_mu.eval(x[0])),
        }
    }

    pub fn grad_log_density(&self, x: &[f64]) -> Result<DVector<f64>> {
        match self {
            ReducedDensity::Gaussian(st) => {
                let chol = st.cov.clone().cholesky().ok_or_else(|| Error::LinearSolve {
                    context: "ReducedDensity::grad_log_density".into(),
                    detail: "covariance not SPD".into(),
                })?;
                let diff = DVector::from_column_slice(x) - &st.mean;
                Ok(-chol.solve(&diff))
            }
            ReducedDensity::Grid1 { log_mu } => {
                Ok(DVector::from_element(1, log_mu.deriv(x[0])))
            }
        }
    }
}

/// Averaged model over an (x, t) grid, with spline evaluation for m = 1.
pub struct AveragedModel {
    pub m: usize,
    pub grid: XtGrid,
    /// [t index][x index]
    pub points: Vec<Vec<AvgPoint>>,
    /// Max over the grid of |A - A_tilde| (Prop. 3.8 check; backward only).
    pub prop38_residual: Option<f64>,
    pub mu: Option<ReducedDensity>,
    w_spl: Option<Vec<Spline1>>,
    a_spl: Option<Vec<Spline1>>,
    w2_spl: Option<Vec<Spline1>>,
}

impl AveragedModel {
    pub fn build(
        bank: &CellBank,
        comparable: Option<&ComparableSpec>,
        grid: XtGrid,
    ) -> Result<Self> {
        let m = bank.coeffs.m;
        let mut points = Vec::with_capacity(grid.ts.len());
        let mut prop38: f64 = 0.0;
        let mut has_tilde = false;
        for &t in &grid.ts {
            let mut row = Vec::with_capacity(grid.xpoints.len());
            for xp in &grid.xpoints {
                let p = averaged_at(bank, comparable, xp, t)?;
                // PSD check on A.
                let eig = p.a.clone().symmetric_eigen();
                if eig.eigenvalues.min() < -1e-8 {
                    return Err(Error::LinearSolve {
                        context: "AveragedModel::build".into(),
                        detail: format!("A not PSD at x={xp:?}, t={t}"),
                    });
                }
                if let Some(at) = &p.a_tilde {
                    has_tilde = true;
                    prop38 = prop38.max((&p.a - at).amax());
                }
                row.push(p);
            }
            points.push(row);
        }
        let (w_spl, a_spl, w2_spl) = if m == 1 && grid.ts.len() == 1 {
            let xs: Vec<f64> = grid.xpoints.iter().map(|p| p[0]).collect();
            let w = Spline1::natural(xs.clone(), points[0].iter().map(|p| p.w[0]).collect());
            let a = Spline1::natural(xs.clone(), points[0].iter().map(|p| p.a[(0, 0)]).collect());
            let w2 = points[0][0].w2.as_ref().map(|_| {
                Spline1::natural(
                    xs.clone(),
                    points[0].iter().map(|p| p.w2.as_ref().unwrap()[0]).collect(),
                )
            });
            (Some(vec![w]), Some(vec![a]), w2.map(|s| vec![s]))
        } else {
            (None, None, None)
        };
        Ok(AveragedModel {
            m,
            grid,
            points,
            prop38_residual: if has_tilde { Some(prop38) } else { None },
            mu: None,
            w_spl,
            a_spl,
            w2_spl,
        })
    }

    fn spl<'a>(opt: &'a Option<Vec<Spline1>>, name: &str) -> Result<&'a Spline1> {
        opt.as_ref()
            .and_then(|v| v.first())
            .ok_or_else(|| Error::LinearSolve {
                context: "AveragedModel".into(),
                detail: format!("{name}: spline evaluation only available for m=1, single t"),
            })
    }

    pub fn w_at(&self, x: f64) -> Result<f64> {
        Ok(Self::spl(&self.w_spl, "w")?.eval(x))
    }

    pub fn a_at(&self, x: f64) -> Result<f64> {
        Ok(Self::spl(&self.a_spl, "A")?.eval(x))
    }

    pub fn w2_at(&self, x: f64) -> Result<f64> {
        Ok(Self::spl(&self.w2_spl, "w2")?.eval(x))
    }

    pub fn da_dx_at(&self, x: f64) -> Result<f64> {
        Ok(Self::spl(&self.a_spl, "A")?.deriv(x))
    }

    /// Solve the reduced pseudo-stationary density and store it.
    ///
    /// If (w, A) are affine/constant on the grid the stationary law is
    /// Gaussian and solved exactly via the Lyapunov equation; otherwise the
    /// 1-D zero-flux formula mu ~ (1/A) exp(int 2w/A) is integrated on the
    /// x-grid.
    pub fn solve_mu(&mut self) -> Result<()> {
        let t0 = 0;
        // Detect affine w / constant A by least squares over the grid points.
        let mdim = self.m;
        let npts = self.grid.xpoints.len();
        let mut design = DMatrix::zeros(npts * mdim, mdim * (mdim + 1));
        let mut target = DVector::zeros(npts * mdim);
        for (pi, xp) in self.grid.xpoints.iter().enumerate() {
            let p = &self.points[t0][pi];
            for i in 0..mdim {
                let row = pi * mdim + i;
                for j in 0..mdim {
                    design[(row, i * (mdim + 1) + j)] = xp[j];
                }
                design[(row, i * (mdim + 1) + mdim)] = 1.0;
                target[row] = p.w[i];
            }
        }
        let sol = (design.transpose() * &design)
            .lu()
            .solve(&(design.transpose() * &target));
        let affine = sol.and_then(|coef| {
            // Check the fit and A-constancy.
            let mut wmat = DMatrix::zeros(mdim, mdim);
            let mut w0 = DVector::zeros(mdim);
            for i in 0..mdim {
                for j in 0..mdim {
                    wmat[(i, j)] = coef[i * (mdim + 1) + j];
                }
                w0[i] = coef[i * (mdim + 1) + mdim];
            }
            let a0 = self.points[t0][0].a.clone();
            let mut ok = true;
            for (pi, xp) in self.grid.xpoints.iter().enumerate() {
                let p = &self.points[t0][pi];
                let xv = DVector::from_column_slice(xp);
                let pred = &wmat * xv + &w0;
                if (pred - &p.w).amax() > 1e-6 || (&p.a - &a0).amax() > 1e-6 {
                    ok = false;
                    break;
                }
            }
            if ok {
                Some((wmat, w0, a0))
            } else {
                None
            }
        });
        self.mu = Some(match affine {
            Some((wmat, w0, a0)) => {
                // Noise matrix: symmetric square root of A.
                let eig = a0.symmetric_eigen();
                let mut root = DMatrix::zeros(mdim, mdim);
                for k in 0..mdim {
                    let lam = eig.eigenvalues[k].max(0.0).sqrt();
                    let v = eig.eigenvectors.column(k).into_owned();
                    root += &v * v.transpose() * lam;
                }
                let sde = LinearSde {
                    drift_mat: wmat,
                    drift_const: w0,
                    noise: root,
                };
                ReducedDensity::Gaussian(sde.stationary()?)
            }
            None => {
                if mdim != 1 {
                    return Err(Error::LinearSolve {
                        context: "solve_mu".into(),
                        detail: "nonlinear reduced density only supported for m=1".into(),
                    });
                }
                // 1-D zero-flux stationary density: mu ~ (1/A) exp(int 2w/A).
                let xs: Vec<f64> = self.grid.xpoints.iter().map(|p| p[0]).collect();
                let n = xs.len();
                let mut logmu = vec![0.0; n];
                for i in 1..n {
                    let h = xs[i] - xs[i - 1];
                    let f0 = 2.0 * self.points[t0][i - 1].w[0] / self.points[t0][i - 1].a[(0, 0)];
                    let f1 = 2.0 * self.points[t0][i].w[0] / self.points[t0][i].a[(0, 0)];
                    logmu[i] = logmu[i - 1] + 0.5 * h * (f0 + f1);
                }
                for i in 0..n {
                    logmu[i] -= self.points[t0][i].a[(0, 0)].ln();
                }
                // Normalize under trapezoid quadrature.
                let mut mass = 0.0;
                for i in 1..n {
                    mass += 0.5 * (xs[i] - xs[i - 1]) * (logmu[i].exp() + logmu[i - 1].exp());
                }
                let shift = mass.ln();
                for v in logmu.iter_mut() {
                    *v -= shift;
                }
                ReducedDensity::Grid1 {
                    log_mu: Spline1::natural(xs, logmu),
                }
            }
        });
        Ok(())
    }
}

/// Extended system over an (x, t) grid.
pub struct ExtendedSystem {
    pub side: Side,
    pub grid: XtGrid,
    pub fwd: Option<Vec<Vec<ForwardExtPoint>>>,
    pub bwd: Option<Vec<Vec<BackwardExtPoint>>>,
    /// Worst identity residual over the grid.
    pub max_identity_residual: f64,
    bw_spl: Option<Spline1>,
    row_spl: Option<Vec<Spline1>>,
    diag_spl: Option<Spline1>,
    vec_g1_spl: Option<Vec<Spline1>>,
    div_g1_spl: Option<Spline1>,
}

impl ExtendedSystem {
    pub fn build_forward(
        bank: &CellBank,
        comparable: &ComparableSpec,
        grid: XtGrid,
    ) -> Result<Self> {
        let m = bank.coeffs.m;
        let mut rows = Vec::with_capacity(grid.ts.len());
        let mut worst: f64 = 0.0;
        for &t in &grid.ts {
            let mut row = Vec::with_capacity(grid.xpoints.len());
            for xp in &grid.xpoints {
                let p = extended_forward_at(bank, comparable, xp, t)?;
                worst = worst.max(p.resid_double).max(p.resid_row);
                row.push(p);
            }
            rows.push(row);
        }
        let (bw_spl, row_spl, diag_spl) = if m == 1 && grid.ts.len() == 1 {
            let xs: Vec<f64> = grid.xpoints.iter().map(|p| p[0]).collect();
            (
                Some(Spline1::natural(
                    xs.clone(),
                    rows[0].iter().map(|p| p.bar_w_m1).collect(),
                )),
                Some(vec![Spline1::natural(
                    xs.clone(),
                    rows[0].iter().map(|p| p.bar_a_m1x[0]).collect(),
                )]),
                Some(Spline1::natural(
                    xs,
                    rows[0].iter().map(|p| p.bar_a_m1m1).collect(),
                )),
            )
        } else {
            (None, None, None)
        };
        Ok(ExtendedSystem {
            side: Side::Forward,
            grid,
            fwd: Some(rows),
            bwd: None,
            max_identity_residual: worst,
            bw_spl,
            row_spl,
            diag_spl,
            vec_g1_spl: None,
            div_g1_spl: None,
        })
    }

    pub fn build_backward(
        bank: &CellBank,
        comparable: &ComparableSpec,
        grid: XtGrid,
    ) -> Result<Self> {
        let m = bank.coeffs.m;
        let mut rows = Vec::with_capacity(grid.ts.len());
        let mut worst: f64 = 0.0;
        for &t in &grid.ts {
            let mut row = Vec::with_capacity(grid.xpoints.len());
            for xp in &grid.xpoints {
                let p = extended_backward_at(bank, comparable, xp, t)?;
                worst = worst.max(p.resid_l88).max(p.resid_l879);
                row.push(p);
            }
            rows.push(row);
        }
        let (bw_spl, row_spl, diag_spl, vec_g1_spl, div_g1_spl) = if m == 1 && grid.ts.len() == 1 {
            let xs: Vec<f64> = grid.xpoints.iter().map(|p| p[0]).collect();
            (
                Some(Spline1::natural(
                    xs.clone(),
                    rows[0].iter().map(|p| p.bar_w_m1).collect(),
                )),
                Some(vec![Spline1::natural(
                    xs.clone(),
                    rows[0].iter().map(|p| p.bar_a_m1x[0]).collect(),
                )]),
                Some(Spline1::natural(
                    xs.clone(),
                    rows[0].iter().map(|p| p.bar_a_m1m1).collect(),
                )),
                Some(vec![Spline1::natural(
                    xs.clone(),
                    rows[0].iter().map(|p| p.vec_g1[0]).collect(),
                )]),
                Some(Spline1::natural(
                    xs,
                    rows[0].iter().map(|p| p.div_g1).collect(),
                )),
            )
        } else {
            (None, None, None, None, None)
        };
        Ok(ExtendedSystem {
            side: Side::Backward,
            grid,
            fwd: None,
            bwd: Some(rows),
            max_identity_residual: worst,
            bw_spl,
            row_spl,
            diag_spl,
            vec_g1_spl,
            div_g1_spl,
        })
    }

    fn need<'a>(opt: &'a Option<Spline1>, name: &str) -> Result<&'a Spline1> {
        opt.as_ref().ok_or_else(|| Error::LinearSolve {
            context: "ExtendedSystem".into(),
            detail: format!("{name}: spline evaluation only for m=1, single t"),
        })
    }

    pub fn bar_w_m1_at(&self, x: f64) -> Result<f64> {
        Ok(Self::need(&self.bw_spl, "bar_w_m1")?.eval(x))
    }

    pub fn bar_a_m1x_at(&self, x: f64) -> Result<f64> {
        let s = self
            .row_spl
            .as_ref()
            .and_then(|v| v.first())
            .ok_or_else(|| Error::LinearSolve {
                context: "ExtendedSystem".into(),
                detail: "bar_a_m1x: spline evaluation only for m=1, single t".into(),
            })?;
        Ok(s.eval(x))
    }

    pub fn bar_a_m1m1_at(&self, x: f64) -> Result<f64> {
        Ok(Self::need(&self.diag_spl, "bar_a_m1m1")?.eval(x))
    }

    pub fn vec_g1_at(&self, x: f64) -> Result<f64> {
        let s = self
            .vec_g1_spl
            .as_ref()
            .and_then(|v| v.first())
            .ok_or_else(|| Error::LinearSolve {
                context: "ExtendedSystem".into(),
                detail: "vec_g1: spline evaluation only for m=1, single t".into(),
            })?;
        Ok(s.eval(x))
    }

    pub fn div_g1_at(&self, x: f64) -> Result<f64> {
        Ok(Self::need(&self.div_g1_spl, "div_g1")?.eval(x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog;
    use crate::functionals::{make_entropy_production_spec, make_housekeeping_spec};
    use crate::model::ParityVector;

    fn ou_bank(gamma: f64, analytic: bool, f_tilde: Option<VecField>) -> CellBank {
        let model = catalog::ou(gamma);
        CellBank::new(
            model.coeffs.clone(),
            if analytic { model.analytic_cell.clone() } else { None },
            model.fast_grid(257),
            f_tilde,
        )
    }

    #[test]
    fn averaged_ou_coefficients() {
        // w = -x and A = 1 + 2/gamma, both backends.
        for (gamma, a_exact) in [(1.0, 3.0), (2.0, 2.0)] {
            for analytic in [true, false] {
                let bank = ou_bank(gamma, analytic, None);
                let tol = if analytic { 1e-8 } else { 5e-3 };
                for &x in &[-1.3, 0.0, 0.7] {
                    let p = averaged_at(&bank, None, &[x], 0.0).unwrap();
                    assert!(
                        (p.w[0] + x).abs() < tol,
                        "gamma={gamma} analytic={analytic} w({x}) = {}",
                        p.w[0]
                    );
                    assert!(
                        (p.a[(0, 0)] - a_exact).abs() < tol,
                        "gamma={gamma} analytic={analytic} A({x}) = {}",
                        p.a[(0, 0)]
                    );
                }
            }
        }
    }

    #[test]
    fn averaged_underdamped_coefficients() {
        // w = -x/gamma, A = 2/gamma.
        let gamma = 1.5;
        let model = catalog::underdamped(gamma);
        let bank = CellBank::new(
            model.coeffs.clone(),
            model.analytic_cell.clone(),
            model.fast_grid(257),
            None,
        );
        for &x in &[-0.8, 0.4] {
            let p = averaged_at(&bank, None, &[x], 0.0).unwrap();
            assert!((p.w[0] + x / gamma).abs() < 1e-8, "w({x}) = {}", p.w[0]);
            assert!((p.a[(0, 0)] - 2.0 / gamma).abs() < 1e-8, "A({x}) = {}", p.a[(0, 0)]);
        }
    }

    fn shifted_forward(coeffs: &CoefficientSet) -> ComparableSpec {
        let base = coeffs.b.clone();
        ComparableSpec {
            name: "shift".into(),
            side: Side::Forward,
            b2: VecField::new(1, move |x, y, t, out| {
                base.eval_into(x, y, t, out);
                out[0] += 1.0;
            }),
            g2: coeffs.g.clone(),
            f2: None,
            parity: None,
        }
    }

    #[test]
    fn forward_extended_coefficients_for_shifted_ou() {
        // b_hat = b + 1: bar_w^{m+1} = 1/2, bar_A^{m+1,x} = -1,
        // bar_A^{m+1,m+1} = 1, and both structural identities hold.
        let bank = ou_bank(1.0, true, None);
        let cmp = shifted_forward(&bank.coeffs);
        for &x in &[-0.9, 0.3] {
            let p = extended_forward_at(&bank, &cmp, &[x], 0.0).unwrap();
            assert!((p.bar_w_m1 - 0.5).abs() < 1e-8, "bar_w {}", p.bar_w_m1);
            assert!((p.bar_a_m1x[0] + 1.0).abs() < 1e-8, "bar_a_x {}", p.bar_a_m1x[0]);
            assert!((p.bar_a_m1m1 - 1.0).abs() < 1e-8, "bar_a_diag {}", p.bar_a_m1m1);
            assert!(p.resid_double < 1e-8 && p.resid_row < 1e-8);
        }
    }

    #[test]
    fn backward_extended_coefficients_for_reversed_ou() {
        // Velocity reversal of ou(1): b_tilde = -x, g_tilde = 0, f_tilde = -y.
        // Then w_tilde = -x, vec_g1 = bar_A^{m+1,x} = -2x, and the Lemma
        // identities close.
        let model = catalog::ou(1.0);
        let delta = ParityVector::slow_even_fast_odd(1, 1);
        let cmp = make_entropy_production_spec(&model.coeffs, &delta);
        let bank = CellBank::new(
            model.coeffs.clone(),
            model.analytic_cell.clone(),
            model.fast_grid(257),
            cmp.f2.clone(),
        );
        for &x in &[-1.1, 0.6] {
            let avg = averaged_at(&bank, Some(&cmp), &[x], 0.0).unwrap();
            assert!((avg.w2.as_ref().unwrap()[0] + x).abs() < 1e-7, "w_tilde at {x}");
            let p = extended_backward_at(&bank, &cmp, &[x], 0.0).unwrap();
            assert!((p.vec_g1[0] + 2.0 * x).abs() < 1e-6, "vec_g1 {}", p.vec_g1[0]);
            assert!((p.bar_a_m1x[0] + 2.0 * x).abs() < 1e-6, "bar_a_x {}", p.bar_a_m1x[0]);
            assert!(p.resid_l88 < 1e-6, "L8.8 residual {}", p.resid_l88);
            assert!(p.resid_l879 < 1e-6, "L8.7/8.9 residual {}", p.resid_l879);
        }
    }

    #[test]
    fn backward_extended_coefficients_for_equilibrium_underdamped() {
        // Velocity reversal of underdamped Langevin at equilibrium:
        // bar_w^{m+1} = (x^2-1)/gamma, bar_A^{m+1,x} = -2x/gamma,
        // bar_A^{m+1,m+1} = 2x^2/gamma, w_tilde = -x/gamma.
        let gamma = 1.0;
        let model = catalog::underdamped(gamma);
        let delta = ParityVector::slow_even_fast_odd(1, 1);
        let cmp = make_entropy_production_spec(&model.coeffs, &delta);
        let bank = CellBank::new(
            model.coeffs.clone(),
            model.analytic_cell.clone(),
            model.fast_grid(257),
            cmp.f2.clone(),
        );
        for &x in &[-0.7, 1.2] {
            let avg = averaged_at(&bank, Some(&cmp), &[x], 0.0).unwrap();
            assert!(
                (avg.w2.as_ref().unwrap()[0] + x / gamma).abs() < 1e-7,
                "w_tilde at {x}: {}",
                avg.w2.as_ref().unwrap()[0]
            );
            let p = extended_backward_at(&bank, &cmp, &[x], 0.0).unwrap();
            assert!(
                (p.bar_w_m1 - (x * x - 1.0) / gamma).abs() < 1e-6,
                "bar_w at {x}: {}",
                p.bar_w_m1
            );
            assert!(
                (p.bar_a_m1x[0] + 2.0 * x / gamma).abs() < 1e-6,
                "bar_a_x at {x}: {}",
                p.bar_a_m1x[0]
            );
            assert!(
                (p.bar_a_m1m1 - 2.0 * x * x / gamma).abs() < 1e-6,
                "bar_a_diag at {x}: {}",
                p.bar_a_m1m1
            );
            assert!(p.resid_l88 < 1e-6 && p.resid_l879 < 1e-6);
        }
    }

    #[test]
    fn reduced_density_of_reversible_ou_is_gaussian() {
        // ou_reversible: w = -x, A = 1, stationary mu = N(0, 1/2).
        let model = catalog::ou_reversible();
        let bank = CellBank::new(
            model.coeffs.clone(),
            model.analytic_cell.clone(),
            model.fast_grid(257),
            None,
        );
        let grid = XtGrid::line(-3.0, 3.0, 21, vec![0.0]);
        let mut avg = AveragedModel::build(&bank, None, grid).unwrap();
        avg.solve_mu().unwrap();
        match avg.mu.as_ref().unwrap() {
            ReducedDensity::Gaussian(st) => {
                assert!(st.mean[0].abs() < 1e-8);
                assert!((st.cov[(0, 0)] - 0.5).abs() < 1e-8, "var {}", st.cov[(0, 0)]);
            }
            other => panic!("expected Gaussian reduced density, got {other:?}"),
        }
    }

    #[test]
    fn housekeeping_spec_reduces_to_identity_when_reversible() {
        // For the reversible OU the dual-reversed drift equals the original.
        let model = catalog::ou_reversible();
        let bank = CellBank::new(
            model.coeffs.clone(),
            model.analytic_cell.clone(),
            model.fast_grid(257),
            None,
        );
        let grid = XtGrid::line(-3.0, 3.0, 21, vec![0.0]);
        let mut avg = AveragedModel::build(&bank, None, grid).unwrap();
        avg.solve_mu().unwrap();
        let delta = ParityVector::all_even(1, 1);
        let hk = make_housekeeping_spec(
            &model.coeffs,
            &delta,
            avg.mu.as_ref().unwrap(),
            None,
        )
        .unwrap();
        for &x in &[-1.0, 0.0, 1.4] {
            let bh = hk.b2.eval(&[x], &[0.2], 0.0);
            let b = model.coeffs.b.eval(&[x], &[0.2], 0.0);
            assert!((bh - b).amax() < 1e-8, "b_hat != b at {x}");
        }
    }

    #[test]
    fn spline_interpolates_and_differentiates() {
        let xs: Vec<f64> = (0..21).map(|i| -2.0 + 0.2 * i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| x * x * x).collect();
        let s = Spline1::natural(xs, ys);
        assert!((s.eval(0.73) - 0.73f64.powi(3)).abs() < 1e-3);
        assert!((s.deriv(0.73) - 3.0 * 0.73f64 * 0.73).abs() < 1e-2);
    }

    #[test]
    fn extended_system_splines_match_pointwise_values() {
        let bank = ou_bank(1.0, true, None);
        let cmp = shifted_forward(&bank.coeffs);
        let grid = XtGrid::line(-2.0, 2.0, 17, vec![0.0]);
        let ext = ExtendedSystem::build_forward(&bank, &cmp, grid).unwrap();
        assert!((ext.bar_w_m1_at(0.5).unwrap() - 0.5).abs() < 1e-6);
        assert!((ext.bar_a_m1x_at(0.5).unwrap() + 1.0).abs() < 1e-6);
        assert!((ext.bar_a_m1m1_at(0.5).unwrap() - 1.0).abs() < 1e-6);
        assert!(ext.max_identity_residual < 1e-7);
    }
}
