//! Path functionals: integrand bundles for the eps-level processes and
//! drift/noise closures for the limit (reduced, extended) systems.
//!
//! Forward (Girsanov against a comparable sharing f, c, sigma, eta):
//!   F^eps = int (B-Bhat)' D^-1 Sigma dW + 1/2 int (B-Bhat)' D^-1 (B-Bhat) dt,
//! which is eps-free in reduced form: with u0 = (b-bhat; g-ghat) and
//! M = [[a,h],[h',alpha]], (B-Bhat)'D^-1 Sigma = u0' M^+ Sigma0.
//!
//! Backward (comparable run in reversed time), direct form:
//!   G^eps = log p^eps(xi_0,0) - log p^eps(xi_T,T)
//!         + int (B+Btilde-div D)' D^-1 Sigma dW
//!         + int [ 1/2 (B+Btilde-div D)' D^-1 (B+Btilde-div D)
//!                 + div(Btilde - 1/2 div D) ] dt,
//! and the equivalent split G^eps = I^eps + H^eps where
//!   I^eps = log[(p^eps/rho)(xi_0,0)] - log[(p^eps/rho)(xi_T,T)],
//!   H^eps = int sigma^{m+1} dW + int (b^{m+1} + f^{m+1}/eps) dt,
//! with sigma^{m+1} = (B+Btilde-div D-D grad log rho)' D^-1 Sigma (eps-free in
//! reduced form once the compatibility conditions hold).
//!
//! Integrands are plain closures over (x, y, t) writing the dW row into a
//! caller buffer; the constant-noise/constant-cell fast path is allocation
//! free so the Monte Carlo loop stays at O(100ns) per step.

use crate::averaging::{pinv_apply, AveragedModel, ExtendedSystem, ReducedDensity};
use crate::cell::{analytic_cell_density, build_cell, GaussianCell};
use crate::density::GaussianDensityPath;
use crate::error::Error;
use crate::field::VecField;
use crate::model::{
    apply_parity, assemble_drift_diffusion, check_compatible_conditions, ComparableSpec,
    CoefficientSet, InitialLaw, MultiscaleModel, ParityVector, Side,
};
use crate::Result;
use nalgebra::{DMatrix, DVector};
use std::sync::Arc;

/// Stack-buffer capacity for the hot-loop integrands (joint dimension and
/// noise dimension must both fit).
pub const MAX_DIM: usize = 8;

/// Which end of the step the dW integrand is evaluated at.  All shipped
/// accumulators use the Ito (left) convention; `Right` implements the
/// backward integral for functionals whose drift is stated in that
/// convention.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Endpoint {
    Left,
    Right,
}

type IntegrandFn = Arc<dyn Fn(&[f64], &[f64], f64, &mut [f64]) -> f64 + Send + Sync>;
type BoundaryFn = Arc<dyn Fn(&[f64], f64, &[f64], f64) -> Result<f64> + Send + Sync>;

/// A path functional dF = (dt term) dt + (dW row) . dW plus an optional
/// boundary part evaluated at the start/stop states.
///
/// The integrand returns the dt term and writes the dW row (length
/// `noise_dim`); a NaN return signals an invalid evaluation (e.g. a weighted
/// vector outside the range of a singular diffusion) and aborts the run.
#[derive(Clone)]
pub struct PathFunctional {
    pub name: String,
    pub endpoint: Endpoint,
    pub noise_dim: usize,
    pub eval: IntegrandFn,
    pub boundary: Option<BoundaryFn>,
}

impl PathFunctional {
    /// Copy of this functional with the dt-integrand sign flipped.  Breaks the
    /// exponential-martingale drift condition on purpose; used to confirm the
    /// statistical harness detects a broken accumulator.
    pub fn with_drift_sign_flipped(&self) -> PathFunctional {
        let inner = self.eval.clone();
        PathFunctional {
            name: format!("{}(dt-flipped)", self.name),
            endpoint: self.endpoint,
            noise_dim: self.noise_dim,
            eval: Arc::new(move |x, y, t, row| -inner(x, y, t, row)),
            boundary: self.boundary.clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// Small dense kernels over stack buffers.
// ---------------------------------------------------------------------------

/// Row-major pseudo-inverse (and the matrix itself, for range checks).
struct SmallPinv {
    d: usize,
    pinv: Vec<f64>,
    mat: Vec<f64>,
    singular: bool,
}

impl SmallPinv {
    fn build(mmat: &DMatrix<f64>) -> Self {
        let d = mmat.nrows();
        let svd = mmat.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let cutoff = smax * 1e-12;
        let singular = svd.singular_values.iter().any(|&s| s <= cutoff);
        let u = svd.u.as_ref().unwrap();
        let vt = svd.v_t.as_ref().unwrap();
        let mut pinv = DMatrix::zeros(d, d);
        for k in 0..svd.singular_values.len() {
            let s = svd.singular_values[k];
            if s > cutoff {
                pinv += vt.row(k).transpose() * u.column(k).transpose() / s;
            }
        }
        SmallPinv {
            d,
            pinv: (0..d * d).map(|q| pinv[(q / d, q % d)]).collect(),
            mat: (0..d * d).map(|q| mmat[(q / d, q % d)]).collect(),
            singular,
        }
    }

    /// q = pinv * u into `q`; returns false when u is (numerically) outside
    /// the range of the singular matrix.
    #[inline]
    fn apply(&self, u: &[f64], q: &mut [f64]) -> bool {
        let d = self.d;
        for i in 0..d {
            let mut s = 0.0;
            for j in 0..d {
                s += self.pinv[i * d + j] * u[j];
            }
            q[i] = s;
        }
        if self.singular {
            let mut r2 = 0.0;
            let mut u2 = 0.0;
            for i in 0..d {
                let mut s = 0.0;
                for j in 0..d {
                    s += self.mat[i * d + j] * q[j];
                }
                let e = s - u[i];
                r2 += e * e;
                u2 += u[i] * u[i];
            }
            if r2 > 1e-16 * u2.max(1.0) {
                return false;
            }
        }
        true
    }
}

fn row_major(mat: &DMatrix<f64>) -> Vec<f64> {
    let (r, c) = mat.shape();
    (0..r * c).map(|q| mat[(q / c, q % c)]).collect()
}

// ---------------------------------------------------------------------------
// Forward eps-level integrands.
// ---------------------------------------------------------------------------

/// Build the F^eps integrand bundle for a forward comparable.  The dt term is
/// 1/2 u0' M^+ u0 and the dW row is u0' M^+ Sigma0 (reduced, eps-free form).
pub fn forward_epsilon_integrands(
    coeffs: &CoefficientSet,
    comparable: &ComparableSpec,
) -> Result<PathFunctional> {
    comparable.validate(coeffs)?;
    if comparable.side != Side::Forward {
        return Err(Error::dim("forward integrands need a forward comparable"));
    }
    let (m, n, p) = (coeffs.m, coeffs.n, coeffs.p);
    if m + n > MAX_DIM || p > MAX_DIM {
        return Err(Error::dim("joint/noise dimension exceeds integrand buffers"));
    }
    let b = coeffs.b.clone();
    let bhat = comparable.b2.clone();
    let g = coeffs.g.clone();
    let ghat = comparable.g2.clone();
    let name = format!("F[{}]", comparable.name);

    if coeffs.sigma.is_constant() && coeffs.eta.is_constant() {
        let zero = vec![0.0; m.max(n)];
        let mmat = coeffs.joint_diffusion_unscaled(&zero[..m], &zero[..n], 0.0);
        let sig0 = row_major(&coeffs.sigma_joint_unscaled(&zero[..m], &zero[..n], 0.0));
        let sp = SmallPinv::build(&mmat);
        let eval = move |x: &[f64], y: &[f64], t: f64, row: &mut [f64]| -> f64 {
            let d = m + n;
            let mut e1 = [0.0; MAX_DIM];
            let mut e2 = [0.0; MAX_DIM];
            let mut u = [0.0; MAX_DIM];
            b.eval_into(x, y, t, &mut e1[..m]);
            bhat.eval_into(x, y, t, &mut e2[..m]);
            for i in 0..m {
                u[i] = e1[i] - e2[i];
            }
            g.eval_into(x, y, t, &mut e1[..n]);
            ghat.eval_into(x, y, t, &mut e2[..n]);
            for i in 0..n {
                u[m + i] = e1[i] - e2[i];
            }
            let mut q = [0.0; MAX_DIM];
            if !sp.apply(&u[..d], &mut q[..d]) {
                return f64::NAN;
            }
            let mut half = 0.0;
            for i in 0..d {
                half += u[i] * q[i];
            }
            for (k, r) in row.iter_mut().enumerate().take(p) {
                let mut s = 0.0;
                for i in 0..d {
                    s += q[i] * sig0[i * p + k];
                }
                *r = s;
            }
            0.5 * half
        };
        return Ok(PathFunctional {
            name,
            endpoint: Endpoint::Left,
            noise_dim: p,
            eval: Arc::new(eval),
            boundary: None,
        });
    }

    // State-dependent noise: assemble and pseudo-invert per evaluation.
    let cs = coeffs.clone();
    let eval = move |x: &[f64], y: &[f64], t: f64, row: &mut [f64]| -> f64 {
        let d = m + n;
        let mut u = DVector::zeros(d);
        let bv = b.eval(x, y, t);
        let bh = bhat.eval(x, y, t);
        let gv = g.eval(x, y, t);
        let gh = ghat.eval(x, y, t);
        for i in 0..m {
            u[i] = bv[i] - bh[i];
        }
        for i in 0..n {
            u[m + i] = gv[i] - gh[i];
        }
        let mmat = cs.joint_diffusion_unscaled(x, y, t);
        let q = match pinv_apply(&mmat, &u, "forward integrand") {
            Ok(q) => q,
            Err(_) => return f64::NAN,
        };
        let sig0 = cs.sigma_joint_unscaled(x, y, t);
        let r = q.transpose() * sig0;
        for k in 0..p {
            row[k] = r[k];
        }
        0.5 * q.dot(&u)
    };
    Ok(PathFunctional {
        name,
        endpoint: Endpoint::Left,
        noise_dim: p,
        eval: Arc::new(eval),
        boundary: None,
    })
}

/// Unreduced (explicitly eps-scaled) forward integrand at a point: returns
/// (dt term, dW row) from the assembled joint drift/diffusion.  Used to
/// verify that the reduced form is eps-free.
pub fn forward_unreduced_at(
    model: &MultiscaleModel,
    comparable: &ComparableSpec,
    x: &[f64],
    y: &[f64],
    t: f64,
) -> Result<(f64, DVector<f64>)> {
    let cs = &model.coeffs;
    let eps = model.epsilon;
    let (bb, dmat, sig) = assemble_drift_diffusion(model, x, y, t)?;
    // Bhat shares f, c: B - Bhat = (b - bhat, (g - ghat)/eps).
    let _ = bb;
    let mut u = DVector::zeros(cs.m + cs.n);
    let bv = cs.b.eval(x, y, t);
    let bh = comparable.b2.eval(x, y, t);
    let gv = cs.g.eval(x, y, t);
    let gh = comparable.g2.eval(x, y, t);
    for i in 0..cs.m {
        u[i] = bv[i] - bh[i];
    }
    for i in 0..cs.n {
        u[cs.m + i] = (gv[i] - gh[i]) / eps;
    }
    let q = pinv_apply(&dmat, &u, "forward_unreduced_at")?;
    Ok((0.5 * q.dot(&u), (q.transpose() * sig).transpose()))
}

// ---------------------------------------------------------------------------
// Backward eps-level accumulators.
// ---------------------------------------------------------------------------

/// Exact joint Gaussian law of a linear model over [-burn_in, t_end].
pub fn joint_density_path(model: &MultiscaleModel, t_end: f64) -> Result<GaussianDensityPath> {
    let lin = model.linear.as_ref().ok_or_else(|| Error::LinearSolve {
        context: "joint_density_path".into(),
        detail: "backward boundary terms need the exact linear-Gaussian density backend".into(),
    })?(model.epsilon);
    let init = match &model.init {
        InitialLaw::Point(z) => crate::density::GaussianState::point(z.clone()),
        InitialLaw::DiagonalGaussian { mean, std } => {
            crate::density::GaussianState::diagonal(mean.clone(), std.clone())
        }
    };
    Ok(GaussianDensityPath::tabulate(
        &lin,
        &init,
        -model.burn_in,
        t_end,
        1e-3,
    ))
}

/// The three per-path accumulators of a backward comparable: the direct
/// Corollary-form G^eps, and the split pieces I^eps (boundary only) and
/// H^eps, which satisfy G^eps = I^eps + H^eps per path up to discretization.
pub struct BackwardAccumulators {
    pub direct: PathFunctional,
    pub i_term: PathFunctional,
    pub h_term: PathFunctional,
}

fn require_const_cell(model: &MultiscaleModel) -> Result<GaussianCell> {
    let spec = model
        .analytic_cell
        .as_ref()
        .ok_or_else(|| Error::LinearSolve {
            context: "backward accumulator".into(),
            detail: "requires the analytic cell backend (Gaussian rho)".into(),
        })?;
    let cs = &model.coeffs;
    let probes: Vec<Vec<f64>> = vec![
        vec![0.0; cs.m],
        vec![0.7; cs.m],
        vec![-1.3; cs.m],
    ];
    let g0 = analytic_cell_density(spec, cs, &probes[0], 0.0)?;
    for xp in &probes[1..] {
        for &tp in &[0.0, 0.37] {
            let gi = analytic_cell_density(spec, cs, xp, tp)?;
            if (&gi.nu - &g0.nu).amax() > 1e-12 || (&gi.cov - &g0.cov).amax() > 1e-12 {
                return Err(Error::LinearSolve {
                    context: "backward accumulator".into(),
                    detail: "fast cell density varies with (x,t); only the constant-cell fast \
                             path is implemented for eps-level backward runs"
                        .into(),
                });
            }
        }
    }
    Ok(g0)
}

/// Build the G^eps accumulators for a backward comparable on a model with
/// constant noise and (x,t)-independent Gaussian cells, with the exact joint
/// density as boundary backend.  Gates on the compatibility conditions.
pub fn backward_epsilon_accumulator(
    model: &MultiscaleModel,
    comparable: &ComparableSpec,
    density: Arc<GaussianDensityPath>,
) -> Result<BackwardAccumulators> {
    comparable.validate(&model.coeffs)?;
    if comparable.side != Side::Backward {
        return Err(Error::dim("backward accumulator needs a backward comparable"));
    }
    let cs = &model.coeffs;
    let (m, n, p) = (cs.m, cs.n, cs.p);
    if m + n > MAX_DIM || p > MAX_DIM {
        return Err(Error::dim("joint/noise dimension exceeds integrand buffers"));
    }
    if !(cs.sigma.is_constant() && cs.eta.is_constant()) {
        return Err(Error::LinearSolve {
            context: "backward accumulator".into(),
            detail: "state-dependent noise is not supported in the eps-level backward \
                     accumulator (div D terms); constant sigma, eta required"
                .into(),
        });
    }
    let gc = require_const_cell(model)?;
    let eps = model.epsilon;

    // Compatibility gate on a production-size grid at a reference slow point.
    let f_tilde = comparable.f2.clone().expect("validated backward comparable");
    let grid = model.fast_grid(129);
    let cell = build_cell(
        cs,
        model.analytic_cell.as_ref(),
        &vec![0.0; m],
        0.0,
        &grid,
        None,
        None,
    )?;
    let report = check_compatible_conditions(cs, &f_tilde, &cell, None)?;
    let ctol = 1e-8;
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

    let zero = vec![0.0; m.max(n)];
    // Scaled D and Sigma at this eps (constant).
    let mut sig_scaled = cs.sigma_joint_unscaled(&zero[..m], &zero[..n], 0.0);
    for i in 0..n {
        for j in 0..p {
            sig_scaled[(m + i, j)] /= eps;
        }
    }
    let dmat = &sig_scaled * sig_scaled.transpose();
    let dp = SmallPinv::build(&dmat);
    let sig_scaled_rm = row_major(&sig_scaled);
    // Unscaled M and Sigma0 for the reduced sigma^{m+1}.
    let mmat = cs.joint_diffusion_unscaled(&zero[..m], &zero[..n], 0.0);
    let mp = SmallPinv::build(&mmat);
    let sig0_rm = row_major(&cs.sigma_joint_unscaled(&zero[..m], &zero[..n], 0.0));

    let (b, f, g, c) = (cs.b.clone(), cs.f.clone(), cs.g.clone(), cs.c.clone());
    let (bt, gt, ft) = (comparable.b2.clone(), comparable.g2.clone(), f_tilde.clone());

    // --- Direct Corollary form -------------------------------------------
    let direct_eval = {
        let (b, f, g, c) = (b.clone(), f.clone(), g.clone(), c.clone());
        let (bt, gt, ft) = (bt.clone(), gt.clone(), ft.clone());
        move |x: &[f64], y: &[f64], t: f64, row: &mut [f64]| -> f64 {
            let d = m + n;
            let mut e1 = [0.0; MAX_DIM];
            let mut e2 = [0.0; MAX_DIM];
            let mut u = [0.0; MAX_DIM];
            // Slow block of B + Btilde (div D = 0 for constant noise).
            b.eval_into(x, y, t, &mut e1[..m]);
            bt.eval_into(x, y, t, &mut e2[..m]);
            for i in 0..m {
                u[i] = e1[i] + e2[i];
            }
            f.eval_into(x, y, t, &mut e1[..m]);
            ft.eval_into(x, y, t, &mut e2[..m]);
            for i in 0..m {
                u[i] += (e1[i] + e2[i]) / eps;
            }
            // Fast block.
            g.eval_into(x, y, t, &mut e1[..n]);
            gt.eval_into(x, y, t, &mut e2[..n]);
            for i in 0..n {
                u[m + i] = (e1[i] + e2[i]) / eps;
            }
            c.eval_into(x, y, t, &mut e1[..n]);
            for i in 0..n {
                u[m + i] += 2.0 * e1[i] / (eps * eps);
            }
            let mut q = [0.0; MAX_DIM];
            if !dp.apply(&u[..d], &mut q[..d]) {
                return f64::NAN;
            }
            let mut half = 0.0;
            for i in 0..d {
                half += u[i] * q[i];
            }
            for (k, r) in row.iter_mut().enumerate().take(p) {
                let mut s = 0.0;
                for i in 0..d {
                    s += q[i] * sig_scaled_rm[i * p + k];
                }
                *r = s;
            }
            // div Btilde (Bbar = div D / 2 = 0 here).
            let mut divbt = 0.0;
            for j in 0..m {
                divbt += bt.partial_x(j, j, x, y, t) + ft.partial_x(j, j, x, y, t) / eps;
            }
            for k in 0..n {
                divbt += gt.partial_y(k, k, x, y, t) / eps
                    + c.partial_y(k, k, x, y, t) / (eps * eps);
            }
            0.5 * half + divbt
        }
    };
    let dens = density.clone();
    let direct_boundary = Arc::new(move |z0: &[f64], t0: f64, z1: &[f64], t1: f64| {
        Ok(dens.log_density(z0, t0)? - dens.log_density(z1, t1)?)
    });
    let direct = PathFunctional {
        name: format!("G[{}]", comparable.name),
        endpoint: Endpoint::Left,
        noise_dim: p,
        eval: Arc::new(direct_eval),
        boundary: Some(direct_boundary),
    };

    // --- I term: boundary of p^eps / rho ---------------------------------
    let dens = density.clone();
    let gci = gc.clone();
    let i_boundary = Arc::new(move |z0: &[f64], t0: f64, z1: &[f64], t1: f64| {
        let a = dens.log_density(z0, t0)? - gci.log_density(&z0[m..]);
        let b = dens.log_density(z1, t1)? - gci.log_density(&z1[m..]);
        Ok(a - b)
    });
    let i_term = PathFunctional {
        name: format!("I[{}]", comparable.name),
        endpoint: Endpoint::Left,
        noise_dim: p,
        eval: Arc::new(|_x: &[f64], _y: &[f64], _t: f64, row: &mut [f64]| {
            row.fill(0.0);
            0.0
        }),
        boundary: Some(i_boundary),
    };

    // --- H term ----------------------------------------------------------
    // Ito convention throughout: b^{m+1} below is the drift that balances
    // the forward-evaluated sigma^{m+1} dW integral (the backward-integral
    // form of H differs by the covariation of sigma^{m+1}(Z) and W, which
    // is absorbed into the drift when converting).
    // Constant cell: grad_x log rho = 0, d/dt log rho = 0, so
    //   v0 = (b + btilde; g + gtilde),
    //   sigma^{m+1} = v0' M^+ Sigma0,
    //   b^{m+1} = 1/2 v0' M^+ v0 + div_x btilde,
    //   f^{m+1} = sum_k (d gtilde^k/dy_k + gtilde^k d log rho/dy_k)
    //           - sum_j d f^j/dx_j.
    let prec_rm = row_major(&gc.prec);
    let nu: Vec<f64> = gc.nu.iter().copied().collect();
    let h_eval = {
        let (b, f, g) = (b.clone(), f.clone(), g.clone());
        let (bt, gt) = (bt.clone(), gt.clone());
        move |x: &[f64], y: &[f64], t: f64, row: &mut [f64]| -> f64 {
            let d = m + n;
            let mut e1 = [0.0; MAX_DIM];
            let mut e2 = [0.0; MAX_DIM];
            let mut v = [0.0; MAX_DIM];
            b.eval_into(x, y, t, &mut e1[..m]);
            bt.eval_into(x, y, t, &mut e2[..m]);
            for i in 0..m {
                v[i] = e1[i] + e2[i];
            }
            g.eval_into(x, y, t, &mut e1[..n]);
            gt.eval_into(x, y, t, &mut e2[..n]);
            let mut gtv = [0.0; MAX_DIM];
            gtv[..n].copy_from_slice(&e2[..n]);
            for i in 0..n {
                v[m + i] = e1[i] + e2[i];
            }
            let mut q = [0.0; MAX_DIM];
            if !mp.apply(&v[..d], &mut q[..d]) {
                return f64::NAN;
            }
            let mut quad = 0.0;
            for i in 0..d {
                quad += v[i] * q[i];
            }
            for (k, r) in row.iter_mut().enumerate().take(p) {
                let mut s = 0.0;
                for i in 0..d {
                    s += q[i] * sig0_rm[i * p + k];
                }
                *r = s;
            }
            let mut b_m1 = 0.5 * quad;
            for j in 0..m {
                b_m1 += bt.partial_x(j, j, x, y, t);
            }
            let mut f_m1 = 0.0;
            for k in 0..n {
                let mut glr = 0.0;
                for l in 0..n {
                    glr -= prec_rm[k * n + l] * (y[l] - nu[l]);
                }
                f_m1 += gt.partial_y(k, k, x, y, t) + gtv[k] * glr;
            }
            for j in 0..m {
                f_m1 -= f.partial_x(j, j, x, y, t);
            }
            b_m1 + f_m1 / eps
        }
    };
    let h_term = PathFunctional {
        name: format!("H[{}]", comparable.name),
        endpoint: Endpoint::Left,
        noise_dim: p,
        eval: Arc::new(h_eval),
        boundary: None,
    };

    Ok(BackwardAccumulators {
        direct,
        i_term,
        h_term,
    })
}

/// Unreduced sigma^{m+1} row at a point, from the explicitly eps-scaled
/// quantities: (B + Btilde - div D - D grad log rho)' D^+ Sigma.  Used in
/// tests to confirm the reduced row is eps-free and equal.
pub fn backward_sigma_m1_unreduced(
    model: &MultiscaleModel,
    comparable: &ComparableSpec,
    gc: &GaussianCell,
    x: &[f64],
    y: &[f64],
    t: f64,
) -> Result<DVector<f64>> {
    let cs = &model.coeffs;
    let eps = model.epsilon;
    let (m, n, p) = (cs.m, cs.n, cs.p);
    let mut sig = cs.sigma_joint_unscaled(x, y, t);
    for i in 0..n {
        for j in 0..p {
            sig[(m + i, j)] /= eps;
        }
    }
    let dmat = &sig * sig.transpose();
    let ft = comparable.f2.as_ref().ok_or_else(|| Error::dim("backward comparable"))?;

    let mut v = DVector::zeros(m + n);
    let bv = cs.b.eval(x, y, t);
    let btv = comparable.b2.eval(x, y, t);
    let fv = cs.f.eval(x, y, t);
    let ftv = ft.eval(x, y, t);
    let gv = cs.g.eval(x, y, t);
    let gtv = comparable.g2.eval(x, y, t);
    let cv = cs.c.eval(x, y, t);
    for i in 0..m {
        v[i] = bv[i] + btv[i] + (fv[i] + ftv[i]) / eps;
    }
    for i in 0..n {
        v[m + i] = (gv[i] + gtv[i]) / eps + 2.0 * cv[i] / (eps * eps);
    }
    // div D (constant-noise models: zero) and D grad log rho with the joint
    // (x, y) gradient of the cell density (x-independent cell: x-part zero).
    let glr = gc.grad_log_density(y);
    let h = cs.h(x, y, t);
    let al = cs.alpha(x, y, t);
    for i in 0..m {
        for k in 0..n {
            v[i] -= h[(i, k)] * glr[k] / eps;
        }
    }
    for i in 0..n {
        for k in 0..n {
            v[m + i] -= al[(i, k)] * glr[k] / (eps * eps);
        }
    }
    let q = pinv_apply(&dmat, &v, "backward_sigma_m1_unreduced")?;
    Ok((q.transpose() * sig).transpose())
}

// ---------------------------------------------------------------------------
// Comparable builders: entropy production and housekeeping.
// ---------------------------------------------------------------------------

/// Backward comparable implementing total entropy production: the comparable
/// drifts are the parity transforms b_delta, g_delta, f_delta of the original
/// (the drift of the time-reversed process whenever the model satisfies the
/// generalized detailed-balance structure of the compatibility conditions).
pub fn make_entropy_production_spec(
    coeffs: &CoefficientSet,
    parity: &ParityVector,
) -> ComparableSpec {
    let refl = apply_parity(coeffs, parity);
    ComparableSpec {
        name: "entropy-production".into(),
        side: Side::Backward,
        b2: refl.b,
        g2: refl.g,
        f2: Some(refl.f),
        parity: Some(parity.clone()),
    }
}

/// Forward comparable implementing housekeeping entropy: the dual-reversed
/// slow drift
///   b_hat = -b_delta + div_x a + a (grad_x log mu + grad_x log rho),
///   g_hat = -g_delta + div_x h' + h' (grad_x log mu + grad_x log rho),
/// which shares f, c, sigma, eta with the original.  `grad_log_rho_x` may be
/// omitted when the cell density does not depend on x.
pub fn make_housekeeping_spec(
    coeffs: &CoefficientSet,
    parity: &ParityVector,
    mu: &ReducedDensity,
    grad_log_rho_x: Option<VecField>,
) -> Result<ComparableSpec> {
    let refl = apply_parity(coeffs, parity);
    let (m, n) = (coeffs.m, coeffs.n);
    // Precompute the log-mu gradient as a cheap closure.
    let grad_mu: Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync> = match mu {
        ReducedDensity::Gaussian(st) => {
            let prec = st
                .cov
                .clone()
                .cholesky()
                .ok_or_else(|| Error::LinearSolve {
                    context: "make_housekeeping_spec".into(),
                    detail: "reduced covariance not SPD".into(),
                })?
                .inverse();
            let prec_rm = row_major(&prec);
            let mean: Vec<f64> = st.mean.iter().copied().collect();
            Arc::new(move |x: &[f64], out: &mut [f64]| {
                for i in 0..m {
                    let mut s = 0.0;
                    for j in 0..m {
                        s -= prec_rm[i * m + j] * (x[j] - mean[j]);
                    }
                    out[i] = s;
                }
            })
        }
        ReducedDensity::Grid1 { log_mu } => {
            let spl = log_mu.clone();
            Arc::new(move |x: &[f64], out: &mut [f64]| out[0] = spl.deriv(x[0]))
        }
    };
    let glrx = grad_log_rho_x.clone();
    let cs = coeffs.clone();
    let const_noise = coeffs.sigma.is_constant() && coeffs.eta.is_constant();
    let bd = refl.b.clone();
    let b_hat = VecField::new(m, {
        let cs = cs.clone();
        let grad_mu = grad_mu.clone();
        let glrx = glrx.clone();
        move |x, y, t, out| {
            let mut gl = [0.0; MAX_DIM];
            grad_mu(x, &mut gl[..m]);
            if let Some(gr) = &glrx {
                let mut e = [0.0; MAX_DIM];
                gr.eval_into(x, y, t, &mut e[..m]);
                for i in 0..m {
                    gl[i] += e[i];
                }
            }
            bd.eval_into(x, y, t, out);
            let a = cs.a(x, y, t);
            for i in 0..m {
                let mut s = -out[i];
                for j in 0..m {
                    s += a[(i, j)] * gl[j];
                }
                out[i] = s;
            }
            if !const_noise {
                let diva = crate::model::div_x_of_a(&cs, x, y, t);
                for i in 0..m {
                    out[i] += diva[i];
                }
            }
        }
    });
    let gd = refl.g.clone();
    let g_hat = VecField::new(n, {
        let cs = cs.clone();
        move |x, y, t, out| {
            let mut gl = [0.0; MAX_DIM];
            grad_mu(x, &mut gl[..m]);
            if let Some(gr) = &glrx {
                let mut e = [0.0; MAX_DIM];
                gr.eval_into(x, y, t, &mut e[..m]);
                for i in 0..m {
                    gl[i] += e[i];
                }
            }
            gd.eval_into(x, y, t, out);
            let h = cs.h(x, y, t);
            for i in 0..n {
                let mut s = -out[i];
                for j in 0..m {
                    s += h[(j, i)] * gl[j];
                }
                out[i] = s;
            }
            if !const_noise {
                let divht = crate::model::div_x_of_h_transpose(&cs, x, y, t);
                for i in 0..n {
                    out[i] += divht[i];
                }
            }
        }
    });
    Ok(ComparableSpec {
        name: "housekeeping".into(),
        side: Side::Forward,
        b2: b_hat,
        g2: g_hat,
        f2: None,
        parity: Some(parity.clone()),
    })
}

// ---------------------------------------------------------------------------
// Limit (reduced) systems.
// ---------------------------------------------------------------------------

type LimitFn = Arc<dyn Fn(&[f64], f64, &mut [f64]) + Send + Sync>;

/// Drift/noise closures of a reduced SDE dZ = drift dt + noise dB; `noise`
/// writes a row-major dim x noise_dim matrix.
#[derive(Clone)]
pub struct LimitSystem {
    pub dim: usize,
    pub noise_dim: usize,
    pub labels: Vec<String>,
    pub drift: LimitFn,
    pub noise: LimitFn,
}

/// Symmetric square root of [[p, q], [q, r]] with eigenvalue floor 0,
/// row-major output.
pub fn sym_sqrt2(p: f64, q: f64, r: f64, out: &mut [f64]) {
    if q.abs() < 1e-300 {
        out.copy_from_slice(&[p.max(0.0).sqrt(), 0.0, 0.0, r.max(0.0).sqrt()]);
        return;
    }
    let half = 0.5 * (p + r);
    let disc = (0.25 * (p - r) * (p - r) + q * q).sqrt();
    let l1 = (half + disc).max(0.0).sqrt();
    let l2 = (half - disc).max(0.0).sqrt();
    // Eigenvector for l1^2: (q, l1^2 - p) normalized.
    let (v1, v2) = (q, half + disc - p);
    let nrm = (v1 * v1 + v2 * v2).sqrt();
    let (c, s) = (v1 / nrm, v2 / nrm);
    out[0] = l1 * c * c + l2 * s * s;
    out[1] = (l1 - l2) * c * s;
    out[2] = out[1];
    out[3] = l1 * s * s + l2 * c * c;
}

/// Forward limit decomposition for m = 1: coordinates [X, F, F1, F2] driven by
/// the 2-dimensional Brownian motion of the extended (X, F) system, with
///   dF1 = u/A dX_mart + 1/2 u^2/A dt,  u = w - w_hat,  F2 = F - F1.
pub fn limit_forward_decomposition(
    avg: Arc<AveragedModel>,
    ext: Arc<ExtendedSystem>,
) -> Result<LimitSystem> {
    if avg.m != 1 {
        return Err(Error::dim("limit decomposition implemented for m = 1"));
    }
    let a2 = avg.clone();
    let e2 = ext.clone();
    let drift = Arc::new(move |z: &[f64], _t: f64, out: &mut [f64]| {
        let x = z[0];
        let (w, a, what, bw) = match (
            a2.w_at(x),
            a2.a_at(x),
            a2.w2_at(x),
            e2.bar_w_m1_at(x),
        ) {
            (Ok(w), Ok(a), Ok(wh), Ok(bw)) => (w, a, wh, bw),
            _ => {
                out.fill(f64::NAN);
                return;
            }
        };
        let u = w - what;
        let qv1 = u * u / a;
        out[0] = w;
        out[1] = bw;
        out[2] = 0.5 * qv1;
        out[3] = bw - 0.5 * qv1;
    });
    let noise = Arc::new(move |z: &[f64], _t: f64, out: &mut [f64]| {
        let x = z[0];
        let (w, a, what, arow, adiag) = match (
            avg.w_at(x),
            avg.a_at(x),
            avg.w2_at(x),
            ext.bar_a_m1x_at(x),
            ext.bar_a_m1m1_at(x),
        ) {
            (Ok(w), Ok(a), Ok(wh), Ok(ar), Ok(ad)) => (w, a, wh, ar, ad),
            _ => {
                out.fill(f64::NAN);
                return;
            }
        };
        let u = w - what;
        let mut r = [0.0; 4];
        sym_sqrt2(a, arow, adiag, &mut r);
        // Rows: X, F, F1 = (u/A) * X-row, F2 = F-row - F1-row.
        out[0] = r[0];
        out[1] = r[1];
        out[2] = r[2];
        out[3] = r[3];
        out[4] = u / a * r[0];
        out[5] = u / a * r[1];
        out[6] = r[2] - out[4];
        out[7] = r[3] - out[5];
    });
    Ok(LimitSystem {
        dim: 4,
        noise_dim: 2,
        labels: vec!["X".into(), "F".into(), "F1".into(), "F2".into()],
        drift,
        noise,
    })
}

/// Backward limit decomposition for m = 1: coordinates [X, H, G1int] with
///   dH = bar_w^{m+1} dt + (row m+1 of bar_A^{1/2}) dB,
///   dG1int = vg/A dX_mart + [1/2 vg^2/A + div(w_tilde - 1/2 dA/dx)] dt,
/// where vg = w + w_tilde - dA/dx.  Per path,
///   G  = log p(X_0, 0) - log p(X_T, T) + H,
///   G1 = log p(X_0, 0) - log p(X_T, T) + G1int,
/// so the anomalous part G2 = G - G1 = H - G1int needs no boundary density
/// at all (in particular none at a random stopping time).
pub fn limit_backward_decomposition(
    avg: Arc<AveragedModel>,
    ext: Arc<ExtendedSystem>,
) -> Result<LimitSystem> {
    if avg.m != 1 {
        return Err(Error::dim("limit decomposition implemented for m = 1"));
    }
    let a2 = avg.clone();
    let e2 = ext.clone();
    let drift = Arc::new(move |z: &[f64], _t: f64, out: &mut [f64]| {
        let x = z[0];
        let (w, a, bw, vg, dg) = match (
            a2.w_at(x),
            a2.a_at(x),
            e2.bar_w_m1_at(x),
            e2.vec_g1_at(x),
            e2.div_g1_at(x),
        ) {
            (Ok(w), Ok(a), Ok(bw), Ok(vg), Ok(dg)) => (w, a, bw, vg, dg),
            _ => {
                out.fill(f64::NAN);
                return;
            }
        };
        out[0] = w;
        out[1] = bw;
        out[2] = 0.5 * vg * vg / a + dg;
    });
    let noise = Arc::new(move |z: &[f64], _t: f64, out: &mut [f64]| {
        let x = z[0];
        let (a, arow, adiag, vg) = match (
            avg.a_at(x),
            ext.bar_a_m1x_at(x),
            ext.bar_a_m1m1_at(x),
            ext.vec_g1_at(x),
        ) {
            (Ok(a), Ok(ar), Ok(ad), Ok(vg)) => (a, ar, ad, vg),
            _ => {
                out.fill(f64::NAN);
                return;
            }
        };
        let mut r = [0.0; 4];
        sym_sqrt2(a, arow, adiag, &mut r);
        out[0] = r[0];
        out[1] = r[1];
        out[2] = r[2];
        out[3] = r[3];
        out[4] = vg / a * r[0];
        out[5] = vg / a * r[1];
    });
    Ok(LimitSystem {
        dim: 3,
        noise_dim: 2,
        labels: vec!["X".into(), "H".into(), "G1int".into()],
        drift,
        noise,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::averaging::{CellBank, XtGrid};
    use crate::catalog;
    use crate::density::GaussianState;

    fn shifted_ou_comparable(model: &MultiscaleModel) -> ComparableSpec {
        let base = model.coeffs.b.clone();
        ComparableSpec {
            name: "shift".into(),
            side: Side::Forward,
            b2: VecField::new(1, move |x, y, t, out| {
                base.eval_into(x, y, t, out);
                out[0] += 1.0;
            }),
            g2: model.coeffs.g.clone(),
            f2: None,
            parity: None,
        }
    }

    #[test]
    fn forward_integrand_for_shifted_ou() {
        // b_hat = b + 1 gives u = (-1, 0), M = diag(1, 2), so the dt term is
        // 1/2 and the dW row is (-1, 0) everywhere: F = -W_1(T) + T/2.
        let model = catalog::ou(1.0);
        let cmp = shifted_ou_comparable(&model);
        let func = forward_epsilon_integrands(&model.coeffs, &cmp).unwrap();
        let mut row = [0.0; 2];
        for (x, y) in [(0.0, 0.0), (1.3, -0.4)] {
            let dt = (func.eval)(&[x], &[y], 0.0, &mut row);
            assert!((dt - 0.5).abs() < 1e-12);
            assert!((row[0] + 1.0).abs() < 1e-12 && row[1].abs() < 1e-12);
        }
    }

    #[test]
    fn reduced_forward_integrand_is_eps_free() {
        let mut model = catalog::ou(1.0);
        let cmp = shifted_ou_comparable(&model);
        let func = forward_epsilon_integrands(&model.coeffs, &cmp).unwrap();
        let mut row = [0.0; 2];
        let point = ([0.8], [-0.6]);
        let dt_red = (func.eval)(&point.0, &point.1, 0.0, &mut row);
        for eps in [0.1, 0.02] {
            model.epsilon = eps;
            let (dt_unred, row_unred) =
                forward_unreduced_at(&model, &cmp, &point.0, &point.1, 0.0).unwrap();
            assert!((dt_red - dt_unred).abs() < 1e-10, "eps = {eps}");
            assert!((row_unred[0] - row[0]).abs() < 1e-10);
            assert!((row_unred[1] - row[1]).abs() < 1e-10);
        }
    }

    #[test]
    fn entropy_production_spec_matches_hand_reversal() {
        // Velocity reversal of ou(1): b_tilde(x,y) = -x, g_tilde = 0,
        // f_tilde(x,y) = -y; agreement must be at roundoff level.
        let model = catalog::ou(1.0);
        let delta = ParityVector::slow_even_fast_odd(1, 1);
        let spec = make_entropy_production_spec(&model.coeffs, &delta);
        assert_eq!(spec.side, Side::Backward);
        for (x, y) in [(0.3, -1.2), (-0.8, 0.5), (2.0, 2.0)] {
            assert!((spec.b2.eval(&[x], &[y], 0.0)[0] + x).abs() < 1e-12);
            assert!(spec.g2.eval(&[x], &[y], 0.0)[0].abs() < 1e-12);
            assert!((spec.f2.as_ref().unwrap().eval(&[x], &[y], 0.0)[0] + y).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_direct_integrand_for_reversed_ou() {
        // Hand-assembled Corollary form at gamma = 1:
        //   u = (-2x, -2y/eps^2 + ... ) -> q = D^+ u = (-2x, -y),
        //   dt = 2x^2 + y^2/eps^2 - 1 - 1/eps^2,
        //   dW row = (-2x, -sqrt(2) y / eps).
        let model = catalog::ou(1.0);
        let delta = ParityVector::slow_even_fast_odd(1, 1);
        let spec = make_entropy_production_spec(&model.coeffs, &delta);
        let dens = Arc::new(joint_density_path(&model, 1.0).unwrap());
        let acc = backward_epsilon_accumulator(&model, &spec, dens).unwrap();
        let eps = model.epsilon;
        let mut row = [0.0; 2];
        for (x, y) in [(0.7, -0.3), (-1.1, 0.9)] {
            let dt = (acc.direct.eval)(&[x], &[y], 0.0, &mut row);
            let expect = 2.0 * x * x + y * y / (eps * eps) - 1.0 - 1.0 / (eps * eps);
            assert!((dt - expect).abs() < 1e-9, "dt {dt} vs {expect}");
            assert!((row[0] + 2.0 * x).abs() < 1e-9);
            assert!((row[1] + 2f64.sqrt() * y / eps).abs() < 1e-9);
        }
    }

    #[test]
    fn backward_split_integrand_for_reversed_ou() {
        // sigma^{m+1} = (-2x, 0), b^{m+1} = 2x^2 - 1, f^{m+1} = 0.
        let model = catalog::ou(1.0);
        let delta = ParityVector::slow_even_fast_odd(1, 1);
        let spec = make_entropy_production_spec(&model.coeffs, &delta);
        let dens = Arc::new(joint_density_path(&model, 1.0).unwrap());
        let acc = backward_epsilon_accumulator(&model, &spec, dens).unwrap();
        assert_eq!(acc.h_term.endpoint, Endpoint::Left);
        let mut row = [0.0; 2];
        for (x, y) in [(0.7, -0.3), (-1.1, 0.9)] {
            let dt = (acc.h_term.eval)(&[x], &[y], 0.0, &mut row);
            assert!((dt - (2.0 * x * x - 1.0)).abs() < 1e-9, "dt {dt}");
            assert!((row[0] + 2.0 * x).abs() < 1e-9 && row[1].abs() < 1e-9);
        }
    }

    #[test]
    fn reduced_sigma_matches_unreduced_at_any_eps() {
        let mut model = catalog::ou(1.0);
        let delta = ParityVector::slow_even_fast_odd(1, 1);
        let spec = make_entropy_production_spec(&model.coeffs, &delta);
        let gc = crate::cell::analytic_cell_density(
            model.analytic_cell.as_ref().unwrap(),
            &model.coeffs,
            &[0.0],
            0.0,
        )
        .unwrap();
        for eps in [0.1, 0.03] {
            model.epsilon = eps;
            let s = backward_sigma_m1_unreduced(&model, &spec, &gc, &[0.6], &[-0.9], 0.0).unwrap();
            assert!((s[0] + 1.2).abs() < 1e-9, "eps {eps}: {}", s[0]);
            assert!(s[1].abs() < 1e-9, "eps {eps}: {}", s[1]);
        }
    }

    #[test]
    fn equilibrium_underdamped_has_zero_entropy_integrands() {
        // At equilibrium the reversed process equals the original: the split
        // integrands vanish identically.
        let model = catalog::underdamped(1.0);
        let delta = ParityVector::slow_even_fast_odd(1, 1);
        let spec = make_entropy_production_spec(&model.coeffs, &delta);
        let dens = Arc::new(joint_density_path(&model, 1.0).unwrap());
        let acc = backward_epsilon_accumulator(&model, &spec, dens).unwrap();
        let mut row = [0.0; 1];
        for (x, y) in [(0.5, 0.5), (-1.0, 2.0)] {
            // f^{m+1} = -xy enters scaled by 1/eps; b^{m+1} = 0.
            let dt = (acc.h_term.eval)(&[x], &[y], 0.0, &mut row);
            let expect = -x * y / model.epsilon;
            assert!((dt - expect).abs() < 1e-9, "dt {dt} vs {expect}");
            assert!(row[0].abs() < 1e-12, "sigma row {}", row[0]);
        }
    }

    #[test]
    fn housekeeping_rate_of_rotation_model() {
        // theta-rotation: u = b - b_hat = 2 theta J x, so the dt term is
        // 2 theta^2 |x|^2; under mu = N(0, I/2) the mean rate is 2 theta^2.
        let theta = 0.8;
        let model = catalog::rotation(theta);
        let delta = ParityVector::all_even(2, 1);
        let mu = crate::averaging::ReducedDensity::Gaussian(GaussianState::diagonal(
            vec![0.0, 0.0],
            vec![0.5f64.sqrt(), 0.5f64.sqrt()],
        ));
        let spec = make_housekeeping_spec(&model.coeffs, &delta, &mu, None).unwrap();
        let func = forward_epsilon_integrands(&model.coeffs, &spec).unwrap();
        let mut row = [0.0; 3];
        for x in [[0.7, -0.2], [1.0, 1.0]] {
            let dt = (func.eval)(&x, &[0.1], 0.0, &mut row);
            let r2 = x[0] * x[0] + x[1] * x[1];
            assert!(
                (dt - 2.0 * theta * theta * r2).abs() < 1e-9,
                "dt {dt} vs {}",
                2.0 * theta * theta * r2
            );
        }
    }

    #[test]
    fn sym_sqrt2_squares_back() {
        for (p, q, r) in [(3.0, -1.0, 1.0), (1.0, 0.0, 4.0), (2.0, 1.4, 2.0)] {
            let mut s = [0.0; 4];
            sym_sqrt2(p, q, r, &mut s);
            let p2 = s[0] * s[0] + s[1] * s[2];
            let q2 = s[0] * s[1] + s[1] * s[3];
            let r2 = s[2] * s[1] + s[3] * s[3];
            assert!((p2 - p).abs() < 1e-12 && (q2 - q).abs() < 1e-12 && (r2 - r).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_limit_decomposition_splits_the_noise() {
        // For the shifted OU the F1 row is u/A times the X row and the rows
        // of (X, F) recompose the extended diffusion.
        let model = catalog::ou(1.0);
        let bank = CellBank::new(
            model.coeffs.clone(),
            model.analytic_cell.clone(),
            model.fast_grid(257),
            None,
        );
        let cmp = shifted_ou_comparable(&model);
        let grid = XtGrid::line(-3.0, 3.0, 25, vec![0.0]);
        let avg = Arc::new(
            crate::averaging::AveragedModel::build(&bank, Some(&cmp), grid.clone()).unwrap(),
        );
        let ext = Arc::new(
            crate::averaging::ExtendedSystem::build_forward(&bank, &cmp, grid).unwrap(),
        );
        let sys = limit_forward_decomposition(avg, ext).unwrap();
        assert_eq!(sys.labels, vec!["X", "F", "F1", "F2"]);
        let z = [0.4, 0.0, 0.0, 0.0];
        let mut rows = [0.0; 8];
        (sys.noise)(&z, 0.0, &mut rows);
        // Recomposition: (RR')_{00} = A = 3, (RR')_{11} = bar_A^{m+1,m+1} = 1.
        let a00 = rows[0] * rows[0] + rows[1] * rows[1];
        let a11 = rows[2] * rows[2] + rows[3] * rows[3];
        let a01 = rows[0] * rows[2] + rows[1] * rows[3];
        assert!((a00 - 3.0).abs() < 1e-6 && (a11 - 1.0).abs() < 1e-6 && (a01 + 1.0).abs() < 1e-6);
        // F1 + F2 rows recompose the F row; F2 row orthogonal to X row.
        assert!((rows[4] + rows[6] - rows[2]).abs() < 1e-12);
        assert!((rows[5] + rows[7] - rows[3]).abs() < 1e-12);
        let ortho = rows[0] * rows[6] + rows[1] * rows[7];
        assert!(ortho.abs() < 1e-9, "F2 not orthogonal to X: {ortho}");
        let mut mu = [0.0; 4];
        (sys.drift)(&z, 0.0, &mut mu);
        // u = w - w_hat = -1; dF1 drift = u^2/(2A) = 1/6; F drift = 1/2.
        assert!((mu[0] + 0.4).abs() < 1e-6);
        assert!((mu[1] - 0.5).abs() < 1e-6);
        assert!((mu[2] - 1.0 / 6.0).abs() < 1e-6);
        assert!((mu[3] - (0.5 - 1.0 / 6.0)).abs() < 1e-6);
    }
}
