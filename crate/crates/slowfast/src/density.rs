//! Exact Gaussian densities for linear (affine-drift, constant-noise) models.
//!
//! Supplies p^eps(x, y, t) for the joint system and p(x, t) for reduced
//! systems via moment evolution: mean' = A m + b0, cov' = A C + C A' + Q,
//! integrated with RK4.  These densities feed the boundary terms of the
//! backward functionals.

use crate::error::Error;
use crate::Result;
use nalgebra::{DMatrix, DVector};

/// dZ = (A Z + b0) dt + N dW on R^dim.
#[derive(Clone, Debug)]
pub struct LinearSde {
    pub drift_mat: DMatrix<f64>,
    pub drift_const: DVector<f64>,
    pub noise: DMatrix<f64>,
}

impl LinearSde {
    pub fn dim(&self) -> usize {
        self.drift_const.len()
    }

    /// Stationary Gaussian law (drift matrix must be Hurwitz).
    pub fn stationary(&self) -> Result<GaussianState> {
        let q = &self.noise * self.noise.transpose();
        let cov = crate::cell::solve_lyapunov(&self.drift_mat, &q)?;
        let mean = -self
            .drift_mat
            .clone()
            .lu()
            .solve(&self.drift_const)
            .ok_or_else(|| Error::LinearSolve {
                context: "LinearSde::stationary".into(),
                detail: "singular drift matrix".into(),
            })?;
        Ok(GaussianState { mean, cov })
    }
}

/// Mean and covariance of the state at a given time.
#[derive(Clone, Debug)]
pub struct GaussianState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianState {
    pub fn point(x: Vec<f64>) -> Self {
        let d = x.len();
        GaussianState {
            mean: DVector::from_vec(x),
            cov: DMatrix::zeros(d, d),
        }
    }

    pub fn diagonal(mean: Vec<f64>, std: Vec<f64>) -> Self {
        let d = mean.len();
        let mut cov = DMatrix::zeros(d, d);
        for i in 0..d {
            cov[(i, i)] = std[i] * std[i];
        }
        GaussianState {
            mean: DVector::from_vec(mean),
            cov,
        }
    }

    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        let d = self.mean.len();
        let chol = self.cov.clone().cholesky().ok_or_else(|| Error::LinearSolve {
            context: "GaussianState::log_density".into(),
            detail: "covariance not SPD".into(),
        })?;
        let log_det = 2.0 * (0..d).map(|i| chol.l()[(i, i)].ln()).sum::<f64>();
        let diff = DVector::from_column_slice(z) - &self.mean;
        let sol = chol.solve(&diff);
        Ok(-0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + sol.dot(&diff)))
    }
}

/// RK4 step size for the moment ODEs.
pub const MOMENT_RK4_STEP: f64 = 1e-4;

/// Integrate the mean/covariance ODEs of a linear SDE from t0 to t1.
pub fn evolve_gaussian_moments(
    sde: &LinearSde,
    t0: f64,
    t1: f64,
    state: &GaussianState,
) -> GaussianState {
    assert!(t1 >= t0);
    let q = &sde.noise * sde.noise.transpose();
    let a = &sde.drift_mat;
    let span = t1 - t0;
    let nsteps = (span / MOMENT_RK4_STEP).ceil().max(1.0) as usize;
    let h = span / nsteps as f64;

    let f_mean = |m: &DVector<f64>| a * m + &sde.drift_const;
    let f_cov = |c: &DMatrix<f64>| a * c + c * a.transpose() + &q;

    let mut mean = state.mean.clone();
    let mut cov = state.cov.clone();
    for _ in 0..nsteps {
        let k1 = f_mean(&mean);
        let k2 = f_mean(&(&mean + &k1 * (h / 2.0)));
        let k3 = f_mean(&(&mean + &k2 * (h / 2.0)));
        let k4 = f_mean(&(&mean + &k3 * h));
        mean += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);

        let c1 = f_cov(&cov);
        let c2 = f_cov(&(&cov + &c1 * (h / 2.0)));
        let c3 = f_cov(&(&cov + &c2 * (h / 2.0)));
        let c4 = f_cov(&(&cov + &c3 * h));
        cov += (c1 + c2 * 2.0 + c3 * 2.0 + c4) * (h / 6.0);
    }
    // Guard symmetry against drift of roundoff.
    let covt = cov.transpose();
    GaussianState {
        mean,
        cov: (cov + covt) * 0.5,
    }
}

/// Precomputed Gaussian marginal along a time grid, with linear interpolation
/// of mean/covariance between nodes.  Used as the density backend for
/// boundary terms evaluated at per-path stopping times.
#[derive(Clone, Debug)]
pub struct GaussianDensityPath {
    pub t0: f64,
    pub step: f64,
    pub states: Vec<GaussianState>,
}

impl GaussianDensityPath {
    /// Tabulate the law of the linear SDE over [t0, t1] with the given node step.
    pub fn tabulate(sde: &LinearSde, init: &GaussianState, t0: f64, t1: f64, step: f64) -> Self {
        let nsteps = ((t1 - t0) / step).round().max(1.0) as usize;
        let mut states = Vec::with_capacity(nsteps + 1);
        let mut cur = init.clone();
        states.push(cur.clone());
        for _ in 0..nsteps {
            cur = evolve_gaussian_moments(sde, 0.0, step, &cur);
            states.push(cur.clone());
        }
        GaussianDensityPath { t0, step, states }
    }

    pub fn state_at(&self, t: f64) -> GaussianState {
        let s = (t - self.t0) / self.step;
        let k = s.floor().clamp(0.0, (self.states.len() - 2) as f64) as usize;
        let frac = (s - k as f64).clamp(0.0, 1.0);
        let a = &self.states[k];
        let b = &self.states[k + 1];
        GaussianState {
            mean: &a.mean * (1.0 - frac) + &b.mean * frac,
            cov: &a.cov * (1.0 - frac) + &b.cov * frac,
        }
    }

    pub fn log_density(&self, z: &[f64], t: f64) -> Result<f64> {
        self.state_at(t).log_density(z)
    }

    /// Log-density of a sub-block (marginal) of the state.
    pub fn log_density_marginal(&self, z: &[f64], t: f64, offset: usize) -> Result<f64> {
        let st = self.state_at(t);
        let d = z.len();
        let mean = st.mean.rows(offset, d).into_owned();
        let cov = st.cov.view((offset, offset), (d, d)).into_owned();
        GaussianState { mean, cov }.log_density(z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_ou() -> LinearSde {
        LinearSde {
            drift_mat: DMatrix::from_element(1, 1, -1.0),
            drift_const: DVector::zeros(1),
            noise: DMatrix::from_element(1, 1, 2f64.sqrt()),
        }
    }

    #[test]
    fn stationary_law_of_scalar_ou() {
        let st = scalar_ou().stationary().unwrap();
        assert!(st.mean[0].abs() < 1e-14);
        assert!((st.cov[(0, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn moment_evolution_matches_closed_form() {
        // From a point mass x0: mean = x0 e^{-t}, var = 1 - e^{-2t}.
        let sde = scalar_ou();
        let x0 = 1.7;
        let t = 0.8;
        let out = evolve_gaussian_moments(&sde, 0.0, t, &GaussianState::point(vec![x0]));
        assert!((out.mean[0] - x0 * (-t).exp()).abs() < 1e-10);
        assert!((out.cov[(0, 0)] - (1.0 - (-2.0 * t).exp())).abs() < 1e-10);
    }

    #[test]
    fn density_path_interpolates_and_marginalizes() {
        // 2-D system with independent coordinates; the marginal of the second
        // coordinate must match a scalar computation.
        let sde = LinearSde {
            drift_mat: DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -3.0]),
            drift_const: DVector::zeros(2),
            noise: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]),
        };
        let init = GaussianState::diagonal(vec![0.5, -0.5], vec![0.2, 0.3]);
        let path = GaussianDensityPath::tabulate(&sde, &init, 0.0, 1.0, 1e-3);
        let t = 0.437;
        let st = path.state_at(t);
        let exact = evolve_gaussian_moments(&sde, 0.0, t, &init);
        assert!((st.mean - &exact.mean).amax() < 1e-6);
        assert!((st.cov - &exact.cov).amax() < 1e-6);

        let scalar = LinearSde {
            drift_mat: DMatrix::from_element(1, 1, -3.0),
            drift_const: DVector::zeros(1),
            noise: DMatrix::from_element(1, 1, 2.0),
        };
        let sc_exact = evolve_gaussian_moments(
            &scalar,
            0.0,
            t,
            &GaussianState::diagonal(vec![-0.5], vec![0.3]),
        );
        let lm = path.log_density_marginal(&[0.1], t, 1).unwrap();
        assert!((lm - sc_exact.log_density(&[0.1]).unwrap()).abs() < 1e-6);
    }
}
