//! Multiscale diffusion models.
//!
//! A model is the coefficient tuple (b, f, g, c, sigma, eta) of
//!
//!   dX = [b + (1/eps) f] dt + sigma dW          (slow, R^m)
//!   dY = [(1/eps) g + (1/eps^2) c] dt + (1/eps) eta dW   (fast, R^n)
//!
//! together with the derived diffusion blocks a = sigma sigma', h = sigma eta',
//! alpha = eta eta'.  This module assembles the joint drift/diffusion with its
//! explicit eps scalings, applies parity (odd/even variable) transforms, and
//! checks the compatibility conditions that backward functionals require.

use crate::cell::{CellSolution, FastGrid};
use crate::error::Error;
use crate::field::{MatField, VecField};
use crate::Result;
use nalgebra::{DMatrix, DVector};

/// Reciprocal-condition threshold below which the joint diffusion matrix D is
/// treated as singular where an inverse is required.
pub const RCOND_SINGULAR: f64 = 1e-12;

/// Coefficient fields of a slow/fast diffusion.
#[derive(Clone)]
pub struct CoefficientSet {
    pub m: usize,
    pub n: usize,
    pub p: usize,
    pub b: VecField,
    pub f: VecField,
    pub g: VecField,
    pub c: VecField,
    pub sigma: MatField,
    pub eta: MatField,
}

impl CoefficientSet {
    pub fn validate(&self) -> Result<()> {
        if self.b.dim() != self.m || self.f.dim() != self.m {
            return Err(Error::dim("b, f must have dimension m"));
        }
        if self.g.dim() != self.n || self.c.dim() != self.n {
            return Err(Error::dim("g, c must have dimension n"));
        }
        if self.sigma.rows() != self.m || self.sigma.cols() != self.p {
            return Err(Error::dim("sigma must be m x p"));
        }
        if self.eta.rows() != self.n || self.eta.cols() != self.p {
            return Err(Error::dim("eta must be n x p"));
        }
        Ok(())
    }

    /// Slow diffusion block a = sigma sigma' (m x m).
    pub fn a(&self, x: &[f64], y: &[f64], t: f64) -> DMatrix<f64> {
        let s = self.sigma.eval(x, y, t);
        &s * s.transpose()
    }

    /// Cross block h = sigma eta' (m x n).
    pub fn h(&self, x: &[f64], y: &[f64], t: f64) -> DMatrix<f64> {
        let s = self.sigma.eval(x, y, t);
        let e = self.eta.eval(x, y, t);
        s * e.transpose()
    }

    /// Fast diffusion block alpha = eta eta' (n x n).
    pub fn alpha(&self, x: &[f64], y: &[f64], t: f64) -> DMatrix<f64> {
        let e = self.eta.eval(x, y, t);
        &e * e.transpose()
    }

    /// Unscaled joint diffusion M = [[a, h], [h', alpha]] ((m+n) x (m+n)).
    /// The scaled D is E M E with E = diag(I_m, eps^{-1} I_n).
    pub fn joint_diffusion_unscaled(&self, x: &[f64], y: &[f64], t: f64) -> DMatrix<f64> {
        let d = self.m + self.n;
        let mut out = DMatrix::zeros(d, d);
        let a = self.a(x, y, t);
        let h = self.h(x, y, t);
        let al = self.alpha(x, y, t);
        out.view_mut((0, 0), (self.m, self.m)).copy_from(&a);
        out.view_mut((0, self.m), (self.m, self.n)).copy_from(&h);
        out.view_mut((self.m, 0), (self.n, self.m))
            .copy_from(&h.transpose());
        out.view_mut((self.m, self.m), (self.n, self.n)).copy_from(&al);
        out
    }

    /// Unscaled joint noise matrix Sigma_0 = (sigma; eta) ((m+n) x p).
    pub fn sigma_joint_unscaled(&self, x: &[f64], y: &[f64], t: f64) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.m + self.n, self.p);
        out.view_mut((0, 0), (self.m, self.p))
            .copy_from(&self.sigma.eval(x, y, t));
        out.view_mut((self.m, 0), (self.n, self.p))
            .copy_from(&self.eta.eval(x, y, t));
        out
    }
}

/// Initial distribution for the joint state (x, y).
#[derive(Clone, Debug)]
pub enum InitialLaw {
    Point(Vec<f64>),
    /// Independent Gaussians per coordinate: mean, std per joint coordinate.
    DiagonalGaussian { mean: Vec<f64>, std: Vec<f64> },
}

/// Specification of linear (affine-drift, constant-noise) structure of the
/// joint system at a given eps; enables the exact Gaussian density backend.
pub type LinearSpecFn = std::sync::Arc<dyn Fn(f64) -> crate::density::LinearSde + Send + Sync>;

/// A coefficient set plus the run parameters and domain metadata needed to
/// simulate it and solve its cell problems.
#[derive(Clone)]
pub struct MultiscaleModel {
    pub name: String,
    pub coeffs: CoefficientSet,
    pub epsilon: f64,
    pub horizon: f64,
    /// Backward runs start at -burn_in so the initial layer has decayed by t=0.
    pub burn_in: f64,
    pub init: InitialLaw,
    /// Truncation box for the slow variables.
    pub x_lo: Vec<f64>,
    pub x_hi: Vec<f64>,
    /// Truncation box for the fast variables (default: mean +- 8 stationary
    /// standard deviations of the fast OU proxy).
    pub y_lo: Vec<f64>,
    pub y_hi: Vec<f64>,
    /// Exact Gaussian cell structure (linear c, alpha constant in y), if any.
    pub analytic_cell: Option<crate::cell::AnalyticOuSpec>,
    /// Exact joint linear structure as a function of eps, if any.
    pub linear: Option<LinearSpecFn>,
}

impl MultiscaleModel {
    pub fn fast_grid(&self, nodes_per_axis: usize) -> FastGrid {
        FastGrid::new(self.y_lo.clone(), self.y_hi.clone(), nodes_per_axis)
    }
}

/// Entries +-1 per coordinate, slow entries first.
#[derive(Clone, Debug, PartialEq)]
pub struct ParityVector {
    pub slow: Vec<f64>,
    pub fast: Vec<f64>,
}

impl ParityVector {
    pub fn new(slow: Vec<f64>, fast: Vec<f64>) -> Result<Self> {
        if slow.iter().chain(fast.iter()).any(|&d| d != 1.0 && d != -1.0) {
            return Err(Error::dim("parity entries must be exactly +-1"));
        }
        Ok(ParityVector { slow, fast })
    }

    pub fn all_even(m: usize, n: usize) -> Self {
        ParityVector {
            slow: vec![1.0; m],
            fast: vec![1.0; n],
        }
    }

    /// Slow variables even, fast variables odd (velocities).
    pub fn slow_even_fast_odd(m: usize, n: usize) -> Self {
        ParityVector {
            slow: vec![1.0; m],
            fast: vec![-1.0; n],
        }
    }
}

/// Which side of the duality a comparable process lives on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Forward,
    Backward,
}

/// A comparable diffusion: drift overrides relative to the original model.
///
/// Forward comparables share f, c, sigma, eta with the original and override
/// only (b, g) -> (b_hat, g_hat).  Backward comparables additionally carry
/// their own f_tilde, constrained by the compatibility condition
/// f + f_tilde = div_y h + h grad_y log rho.
#[derive(Clone)]
pub struct ComparableSpec {
    pub name: String,
    pub side: Side,
    /// b_hat (forward) or b_tilde (backward).
    pub b2: VecField,
    /// g_hat (forward) or g_tilde (backward).
    pub g2: VecField,
    /// f_tilde; backward only.
    pub f2: Option<VecField>,
    /// Parity used to build the spec (odd-variable variants); informational.
    pub parity: Option<ParityVector>,
}

impl ComparableSpec {
    pub fn validate(&self, coeffs: &CoefficientSet) -> Result<()> {
        if self.b2.dim() != coeffs.m || self.g2.dim() != coeffs.n {
            return Err(Error::dim("comparable drift dimensions must match model"));
        }
        match (self.side, &self.f2) {
            (Side::Forward, Some(_)) => Err(Error::dim(
                "forward comparable must not override f (it shares f, sigma, eta, c)",
            )),
            (Side::Backward, None) => Err(Error::dim("backward comparable requires f_tilde")),
            _ => Ok(()),
        }
    }

    /// The trivial forward comparable b_hat = b, g_hat = g (F identically 0).
    pub fn identity_forward(coeffs: &CoefficientSet) -> Self {
        ComparableSpec {
            name: "identity".into(),
            side: Side::Forward,
            b2: coeffs.b.clone(),
            g2: coeffs.g.clone(),
            f2: None,
            parity: None,
        }
    }
}

fn check_finite(v: &DVector<f64>, context: &str, point: &[f64]) -> Result<()> {
    if v.iter().any(|z| !z.is_finite()) {
        return Err(Error::NonFinite {
            context: context.into(),
            point: point.to_vec(),
        });
    }
    Ok(())
}

/// Assemble the joint drift B, diffusion D and noise Sigma at a point, with
/// the explicit eps^{-1}, eps^{-2} block scalings:
///
///   B = (b + eps^{-1} f,  eps^{-1} g + eps^{-2} c)
///   D = [[a, eps^{-1} h], [eps^{-1} h', eps^{-2} alpha]],  Sigma = (sigma; eps^{-1} eta)
///
/// Errors on non-finite values and on numerically singular D (reciprocal
/// condition estimate below [`RCOND_SINGULAR`]).
pub fn assemble_drift_diffusion(
    model: &MultiscaleModel,
    x: &[f64],
    y: &[f64],
    t: f64,
) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let cs = &model.coeffs;
    let eps = model.epsilon;
    let (m, n) = (cs.m, cs.n);
    let point: Vec<f64> = x.iter().chain(y.iter()).copied().collect();

    let mut bb = DVector::zeros(m + n);
    let bv = cs.b.eval(x, y, t);
    let fv = cs.f.eval(x, y, t);
    let gv = cs.g.eval(x, y, t);
    let cv = cs.c.eval(x, y, t);
    for i in 0..m {
        bb[i] = bv[i] + fv[i] / eps;
    }
    for i in 0..n {
        bb[m + i] = gv[i] / eps + cv[i] / (eps * eps);
    }
    check_finite(&bb, "joint drift", &point)?;

    let mut sig = cs.sigma_joint_unscaled(x, y, t);
    for i in 0..n {
        for j in 0..cs.p {
            sig[(m + i, j)] /= eps;
        }
    }
    let d = &sig * sig.transpose();
    check_finite(&DVector::from_column_slice(d.as_slice()), "joint diffusion", &point)?;

    let svd = d.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let rcond = if smax > 0.0 { smin / smax } else { 0.0 };
    if rcond < RCOND_SINGULAR {
        return Err(Error::SingularDiffusion {
            context: "assemble_drift_diffusion".into(),
            rcond,
        });
    }
    Ok((bb, d, sig))
}

/// Parity-transform a coefficient set:
///   b_delta^i(x,y,t)  = delta_{x_i} b^i(delta x, delta y, t)   (same for f)
///   g_delta^i, c_delta^i use delta_{y_i};
///   sigma_delta^{ij} = delta_{x_i} sigma^{ij}(delta x, delta y, t),
///   eta_delta^{ij} = delta_{y_i} eta^{ij}(...), so that a, h, alpha transform
///   by delta_{x_i} delta_{x_j} etc.
pub fn apply_parity(coeffs: &CoefficientSet, delta: &ParityVector) -> CoefficientSet {
    let (m, n) = (coeffs.m, coeffs.n);
    assert_eq!(delta.slow.len(), m);
    assert_eq!(delta.fast.len(), n);

    fn reflect(point: &[f64], signs: &[f64], buf: &mut Vec<f64>) {
        buf.clear();
        buf.extend(point.iter().zip(signs).map(|(v, s)| v * s));
    }

    let wrap_vec = |field: &VecField, out_signs: Vec<f64>| -> VecField {
        let field = field.clone();
        let (ds, df) = (delta.slow.clone(), delta.fast.clone());
        VecField::new(field.dim(), move |x, y, t, out| {
            let mut xr = Vec::new();
            let mut yr = Vec::new();
            reflect(x, &ds, &mut xr);
            reflect(y, &df, &mut yr);
            field.eval_into(&xr, &yr, t, out);
            for (o, s) in out.iter_mut().zip(&out_signs) {
                *o *= s;
            }
        })
    };

    let wrap_mat = |field: &MatField, row_signs: Vec<f64>| -> MatField {
        let field = field.clone();
        let (rows, cols) = (field.rows(), field.cols());
        let (ds, df) = (delta.slow.clone(), delta.fast.clone());
        MatField::new(rows, cols, move |x, y, t, out| {
            let mut xr = Vec::new();
            let mut yr = Vec::new();
            reflect(x, &ds, &mut xr);
            reflect(y, &df, &mut yr);
            field.eval_into(&xr, &yr, t, out);
            for i in 0..rows {
                for j in 0..cols {
                    out[i * cols + j] *= row_signs[i];
                }
            }
        })
    };

    CoefficientSet {
        m,
        n,
        p: coeffs.p,
        b: wrap_vec(&coeffs.b, delta.slow.clone()),
        f: wrap_vec(&coeffs.f, delta.slow.clone()),
        g: wrap_vec(&coeffs.g, delta.fast.clone()),
        c: wrap_vec(&coeffs.c, delta.fast.clone()),
        sigma: wrap_mat(&coeffs.sigma, delta.slow.clone()),
        eta: wrap_mat(&coeffs.eta, delta.fast.clone()),
    }
}

/// Max-norm residuals of the compatibility conditions over a fast grid at the
/// frozen (x, t) of `rho`.
#[derive(Clone, Debug, serde::Serialize)]
pub struct CompatibilityReport {
    /// |f + f_tilde - div_y h - h grad_y log rho|_inf
    pub a41_residual: f64,
    /// |2c - div_y alpha - alpha grad_y log rho|_inf
    pub a42_residual: f64,
    /// Max over {c, a, h, alpha} of the parity-invariance residual
    /// |q_delta - q|_inf, when a parity vector is supplied.
    pub parity_residuals: Option<ParityResiduals>,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct ParityResiduals {
    pub c: f64,
    pub a: f64,
    pub h: f64,
    pub alpha: f64,
}

impl ParityResiduals {
    pub fn max(&self) -> f64 {
        self.c.max(self.a).max(self.h).max(self.alpha)
    }
}

/// Evaluate the Assumption-4.1 / 4.2 (and optionally Assumption-6.4 parity)
/// residuals on the grid of `rho`.  Returns residuals; the caller decides
/// pass/fail.
pub fn check_compatible_conditions(
    coeffs: &CoefficientSet,
    f_tilde: &VecField,
    rho: &CellSolution,
    parity: Option<&ParityVector>,
) -> Result<CompatibilityReport> {
    if rho.rho.iter().any(|&r| r <= 0.0) {
        return Err(Error::LinearSolve {
            context: "check_compatible_conditions".into(),
            detail: "rho not strictly positive on grid".into(),
        });
    }
    let grid = &rho.grid;
    let x = &rho.x;
    let t = rho.t;
    let n = coeffs.n;

    let mut a41: f64 = 0.0;
    let mut a42: f64 = 0.0;
    let mut fbuf = vec![0.0; coeffs.m];
    let mut ftbuf = vec![0.0; coeffs.m];
    let mut cbuf = vec![0.0; n];
    for idx in 0..grid.len() {
        let y = grid.node(idx);
        let gl = rho.grad_log_rho_at(idx);

        // A4.1: f + f_tilde = div_y h + h grad_y log rho (slow block, R^m)
        coeffs.f.eval_into(x, &y, t, &mut fbuf);
        f_tilde.eval_into(x, &y, t, &mut ftbuf);
        let h = coeffs.h(x, &y, t);
        let divh = div_y_of_h(coeffs, x, &y, t);
        for i in 0..coeffs.m {
            let mut rhs = divh[i];
            for j in 0..n {
                rhs += h[(i, j)] * gl[j];
            }
            a41 = a41.max((fbuf[i] + ftbuf[i] - rhs).abs());
        }

        // A4.2: 2c = div_y alpha + alpha grad_y log rho (fast block, R^n)
        coeffs.c.eval_into(x, &y, t, &mut cbuf);
        let al = coeffs.alpha(x, &y, t);
        let dival = div_y_of_alpha(coeffs, x, &y, t);
        for i in 0..n {
            let mut rhs = dival[i];
            for j in 0..n {
                rhs += al[(i, j)] * gl[j];
            }
            a42 = a42.max((2.0 * cbuf[i] - rhs).abs());
        }
    }

    let parity_residuals = parity.map(|delta| {
        let refl = apply_parity(coeffs, delta);
        let mut res = ParityResiduals {
            c: 0.0,
            a: 0.0,
            h: 0.0,
            alpha: 0.0,
        };
        let mut c1 = vec![0.0; n];
        let mut c2 = vec![0.0; n];
        for idx in 0..grid.len() {
            let y = grid.node(idx);
            coeffs.c.eval_into(x, &y, t, &mut c1);
            refl.c.eval_into(x, &y, t, &mut c2);
            for i in 0..n {
                res.c = res.c.max((c1[i] - c2[i]).abs());
            }
            res.a = res.a.max((coeffs.a(x, &y, t) - refl.a(x, &y, t)).abs().max());
            let dh = (coeffs.h(x, &y, t) - refl.h(x, &y, t)).abs();
            res.h = res.h.max(if dh.is_empty() { 0.0 } else { dh.max() });
            res.alpha = res
                .alpha
                .max((coeffs.alpha(x, &y, t) - refl.alpha(x, &y, t)).abs().max());
        }
        res
    });

    Ok(CompatibilityReport {
        a41_residual: a41,
        a42_residual: a42,
        parity_residuals,
    })
}

/// (div_y h)^i = sum_j d/dy_j h^{ij}; h = sigma eta'.
pub fn div_y_of_h(coeffs: &CoefficientSet, x: &[f64], y: &[f64], t: f64) -> DVector<f64> {
    let mut out = DVector::zeros(coeffs.m);
    for j in 0..coeffs.n {
        let hj = crate::field::DEFAULT_FD_STEP * (1.0 + y[j].abs());
        let mut yp = y.to_vec();
        yp[j] = y[j] + hj;
        let hp = coeffs.h(x, &yp, t);
        yp[j] = y[j] - hj;
        let hm = coeffs.h(x, &yp, t);
        for i in 0..coeffs.m {
            out[i] += (hp[(i, j)] - hm[(i, j)]) / (2.0 * hj);
        }
    }
    out
}

/// (div_y alpha)^i = sum_j d/dy_j alpha^{ij}.
pub fn div_y_of_alpha(coeffs: &CoefficientSet, x: &[f64], y: &[f64], t: f64) -> DVector<f64> {
    let n = coeffs.n;
    let mut out = DVector::zeros(n);
    for j in 0..n {
        let hj = crate::field::DEFAULT_FD_STEP * (1.0 + y[j].abs());
        let mut yp = y.to_vec();
        yp[j] = y[j] + hj;
        let ap = coeffs.alpha(x, &yp, t);
        yp[j] = y[j] - hj;
        let am = coeffs.alpha(x, &yp, t);
        for i in 0..n {
            out[i] += (ap[(i, j)] - am[(i, j)]) / (2.0 * hj);
        }
    }
    out
}

/// (div_x a)^i = sum_j d/dx_j a^{ij}.
pub fn div_x_of_a(coeffs: &CoefficientSet, x: &[f64], y: &[f64], t: f64) -> DVector<f64> {
    let m = coeffs.m;
    let mut out = DVector::zeros(m);
    for j in 0..m {
        let hj = crate::field::DEFAULT_FD_STEP * (1.0 + x[j].abs());
        let mut xp = x.to_vec();
        xp[j] = x[j] + hj;
        let ap = coeffs.a(&xp, y, t);
        xp[j] = x[j] - hj;
        let am = coeffs.a(&xp, y, t);
        for i in 0..m {
            out[i] += (ap[(i, j)] - am[(i, j)]) / (2.0 * hj);
        }
    }
    out
}

/// (div_x h')^i = sum_j d/dx_j h^{ji} (an n-vector).
pub fn div_x_of_h_transpose(coeffs: &CoefficientSet, x: &[f64], y: &[f64], t: f64) -> DVector<f64> {
    let mut out = DVector::zeros(coeffs.n);
    for j in 0..coeffs.m {
        let hj = crate::field::DEFAULT_FD_STEP * (1.0 + x[j].abs());
        let mut xp = x.to_vec();
        xp[j] = x[j] + hj;
        let hp = coeffs.h(&xp, y, t);
        xp[j] = x[j] - hj;
        let hm = coeffs.h(&xp, y, t);
        for i in 0..coeffs.n {
            out[i] += (hp[(j, i)] - hm[(j, i)]) / (2.0 * hj);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog;
    use crate::cell::{build_cell, FastGrid};
    use proptest::prelude::*;

    #[test]
    fn joint_drift_assembly_scales_with_eps() {
        // ou(1): at (x, y) = (1, 1) and eps = 0.1 the joint drift is
        // (b + f/eps, g/eps + c/eps^2) = (-1 + 10, -100).
        let model = catalog::ou(1.0);
        let (bb, dmat, sig) = assemble_drift_diffusion(&model, &[1.0], &[1.0], 0.0).unwrap();
        assert!((bb[0] - 9.0).abs() < 1e-12);
        assert!((bb[1] + 100.0).abs() < 1e-12);
        // D must equal Sigma Sigma'.
        let d2 = &sig * sig.transpose();
        assert!((dmat - d2).amax() < 1e-12);
    }

    #[test]
    fn diffusion_blocks_of_ou() {
        let model = catalog::ou(2.0);
        let cs = &model.coeffs;
        assert!((cs.a(&[0.0], &[0.0], 0.0)[(0, 0)] - 1.0).abs() < 1e-14);
        assert!(cs.h(&[0.0], &[0.0], 0.0)[(0, 0)].abs() < 1e-14);
        assert!((cs.alpha(&[0.0], &[0.0], 0.0)[(0, 0)] - 4.0).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn parity_is_an_involution(
            x in -3.0f64..3.0,
            y in -3.0f64..3.0,
            sx in prop::bool::ANY,
            sy in prop::bool::ANY,
        ) {
            let model = catalog::ou(1.0);
            let delta = ParityVector::new(
                vec![if sx { 1.0 } else { -1.0 }],
                vec![if sy { 1.0 } else { -1.0 }],
            ).unwrap();
            let twice = apply_parity(&apply_parity(&model.coeffs, &delta), &delta);
            for (orig, refl) in [(&model.coeffs.b, &twice.b), (&model.coeffs.f, &twice.f),
                                 (&model.coeffs.g, &twice.g), (&model.coeffs.c, &twice.c)] {
                let a = orig.eval(&[x], &[y], 0.0);
                let b = refl.eval(&[x], &[y], 0.0);
                prop_assert!((a - b).amax() < 1e-12);
            }
        }
    }

    #[test]
    fn velocity_reversal_satisfies_compatibility_on_ou() {
        let model = catalog::ou(1.0);
        let delta = ParityVector::slow_even_fast_odd(1, 1);
        let refl = apply_parity(&model.coeffs, &delta);
        let grid = FastGrid::new(vec![-8.0], vec![8.0], 257);
        let cell = build_cell(
            &model.coeffs,
            model.analytic_cell.as_ref(),
            &[0.0],
            0.0,
            &grid,
            None,
            None,
        )
        .unwrap();
        let rep = check_compatible_conditions(&model.coeffs, &refl.f, &cell, Some(&delta)).unwrap();
        assert!(rep.a41_residual < 1e-9, "A4.1 residual {}", rep.a41_residual);
        assert!(rep.a42_residual < 1e-9, "A4.2 residual {}", rep.a42_residual);

        // The identity reversal (f_tilde = f) violates A4.1 because h = 0.
        let rep2 =
            check_compatible_conditions(&model.coeffs, &model.coeffs.f, &cell, None).unwrap();
        assert!(rep2.a41_residual > 1.0, "expected violation, got {}", rep2.a41_residual);
    }

    #[test]
    fn comparable_validation_rules() {
        let model = catalog::ou(1.0);
        let cs = &model.coeffs;
        assert!(ComparableSpec::identity_forward(cs).validate(cs).is_ok());
        let mut bad = ComparableSpec::identity_forward(cs);
        bad.side = Side::Backward;
        assert!(bad.validate(cs).is_err(), "backward spec without f_tilde must fail");
    }
}
