//! Built-in benchmark models.
//!
//! All catalog models are linear with constant noise, so the exact Gaussian
//! density backend and the analytic cell backend apply; the numeric FD cell
//! backend is exercised against them in tests.
//!
//! * `ou` — slow OU driven by a fast OU through f = y:
//!     b=-x, f=y, g=0, c=-gamma*y, sigma=(1,0), eta=(0,sqrt(2 gamma)).
//!   Cell problems: rho = N(0,1), phi = y/gamma; averaged w=-x, A=1+2/gamma
//!   (gamma=1 gives the hand-checked A=3).  `gamma` tunes the fast relaxation
//!   rate: smaller gamma makes finite-eps corrections to the slow law larger,
//!   which the convergence study uses for signal above Monte Carlo noise.
//! * `ou_reversible` — same but f=0: the slow dynamics is a reversible OU
//!   (b = (a/2) d/dx log mu with mu = N(0,1/2)); entropy production vanishes
//!   path-wise in the continuum limit.
//! * `underdamped` — underdamped Langevin in the Kramers-Smoluchowski scaling:
//!     b=0, f=y, g=-V'(x) with V=x^2/2, c=-gamma*y, sigma=0, eta=sqrt(2 gamma).
//!   Averaged: w=-x/gamma, A = eta^2/gamma^2 = 2/gamma.  Slow variable even,
//!   fast (velocity) odd.
//! * `rotation` — 2-D slow rotation b = -x + theta*J*x with an uncoupled fast
//!   OU; stationary law mu = N(0, I/2) for every theta, but theta != 0 breaks
//!   detailed balance, giving strictly positive housekeeping entropy.

use crate::cell::AnalyticOuSpec;
use crate::density::LinearSde;
use crate::field::{MatField, VecField};
use crate::model::{CoefficientSet, InitialLaw, MultiscaleModel};
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};
use std::collections::BTreeMap;
use std::sync::Arc;

/// Slow OU driven by a fast OU (the standard benchmark; gamma = 1 in tests).
pub fn ou(gamma: f64) -> MultiscaleModel {
    assert!(gamma > 0.0);
    let eta_val = (2.0 * gamma).sqrt();
    let coeffs = CoefficientSet {
        m: 1,
        n: 1,
        p: 2,
        b: VecField::new(1, |x, _, _, out| out[0] = -x[0]),
        f: VecField::new(1, |_, y, _, out| out[0] = y[0]),
        g: VecField::zeros(1),
        c: VecField::new(1, move |_, y, _, out| out[0] = -gamma * y[0]),
        sigma: MatField::constant(1, 2, vec![1.0, 0.0]),
        eta: MatField::constant(1, 2, vec![0.0, eta_val]),
    };
    let analytic = AnalyticOuSpec {
        kmat: Arc::new(move |_, _| DMatrix::from_element(1, 1, -gamma)),
        nu: Arc::new(|_, _| DVector::zeros(1)),
    };
    let linear = Arc::new(move |eps: f64| LinearSde {
        drift_mat: DMatrix::from_row_slice(
            2,
            2,
            &[-1.0, 1.0 / eps, 0.0, -gamma / (eps * eps)],
        ),
        drift_const: DVector::zeros(2),
        noise: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, eta_val / eps]),
    });
    MultiscaleModel {
        name: format!("ou(gamma={gamma})"),
        coeffs,
        epsilon: 0.1,
        horizon: 1.0,
        burn_in: 1.0,
        init: InitialLaw::DiagonalGaussian {
            mean: vec![0.0, 0.0],
            std: vec![1.0, 1.0],
        },
        x_lo: vec![-10.0],
        x_hi: vec![10.0],
        y_lo: vec![-8.0],
        y_hi: vec![8.0],
        analytic_cell: Some(analytic),
        linear: Some(linear),
    }
}

/// OU benchmark with the fast coupling removed (f = 0); the slow marginal is
/// a reversible stationary OU when started from mu = N(0, 1/2).
pub fn ou_reversible() -> MultiscaleModel {
    let mut model = ou(1.0);
    model.name = "ou_reversible".into();
    model.coeffs.f = VecField::zeros(1);
    model.linear = Some(Arc::new(move |eps: f64| LinearSde {
        drift_mat: DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -1.0 / (eps * eps)]),
        drift_const: DVector::zeros(2),
        noise: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2f64.sqrt() / eps]),
    }));
    // Stationary start: slow from mu = N(0,1/2), fast from rho = N(0,1).
    model.init = InitialLaw::DiagonalGaussian {
        mean: vec![0.0, 0.0],
        std: vec![0.5f64.sqrt(), 1.0],
    };
    model
}

/// Underdamped Langevin (position x, velocity y) with V(x) = x^2/2 in the
/// Kramers-Smoluchowski scaling; sigma = 0, so the joint diffusion is
/// singular and only the fast block carries noise.
pub fn underdamped(gamma: f64) -> MultiscaleModel {
    assert!(gamma > 0.0);
    let eta_val = (2.0 * gamma).sqrt();
    let coeffs = CoefficientSet {
        m: 1,
        n: 1,
        p: 1,
        b: VecField::zeros(1),
        f: VecField::new(1, |_, y, _, out| out[0] = y[0]),
        g: VecField::new(1, |x, _, _, out| out[0] = -x[0]),
        c: VecField::new(1, move |_, y, _, out| out[0] = -gamma * y[0]),
        sigma: MatField::constant(1, 1, vec![0.0]),
        eta: MatField::constant(1, 1, vec![eta_val]),
    };
    let analytic = AnalyticOuSpec {
        kmat: Arc::new(move |_, _| DMatrix::from_element(1, 1, -gamma)),
        nu: Arc::new(|_, _| DVector::zeros(1)),
    };
    let linear = Arc::new(move |eps: f64| LinearSde {
        drift_mat: DMatrix::from_row_slice(
            2,
            2,
            &[0.0, 1.0 / eps, -1.0 / eps, -gamma / (eps * eps)],
        ),
        drift_const: DVector::zeros(2),
        noise: DMatrix::from_row_slice(2, 1, &[0.0, eta_val / eps]),
    });
    MultiscaleModel {
        name: format!("underdamped(gamma={gamma})"),
        coeffs,
        epsilon: 0.1,
        horizon: 1.0,
        burn_in: 1.0,
        // Gibbs start: x ~ e^{-V} = N(0,1), y ~ N(0,1).
        init: InitialLaw::DiagonalGaussian {
            mean: vec![0.0, 0.0],
            std: vec![1.0, 1.0],
        },
        x_lo: vec![-10.0],
        x_hi: vec![10.0],
        y_lo: vec![-8.0],
        y_hi: vec![8.0],
        analytic_cell: Some(analytic),
        linear: Some(linear),
    }
}

/// 2-D slow rotation with an uncoupled fast OU.  theta = 0 is reversible;
/// theta != 0 produces a nonconservative stationary current with positive
/// housekeeping entropy rate 2 theta^2 E|X|^2.
pub fn rotation(theta: f64) -> MultiscaleModel {
    let coeffs = CoefficientSet {
        m: 2,
        n: 1,
        p: 3,
        b: VecField::new(2, move |x, _, _, out| {
            out[0] = -x[0] - theta * x[1];
            out[1] = -x[1] + theta * x[0];
        }),
        f: VecField::zeros(2),
        g: VecField::zeros(1),
        c: VecField::new(1, |_, y, _, out| out[0] = -y[0]),
        sigma: MatField::constant(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
        eta: MatField::constant(1, 3, vec![0.0, 0.0, 2f64.sqrt()]),
    };
    let analytic = AnalyticOuSpec {
        kmat: Arc::new(|_, _| DMatrix::from_element(1, 1, -1.0)),
        nu: Arc::new(|_, _| DVector::zeros(1)),
    };
    let linear = Arc::new(move |eps: f64| LinearSde {
        drift_mat: DMatrix::from_row_slice(
            3,
            3,
            &[
                -1.0,
                -theta,
                0.0,
                theta,
                -1.0,
                0.0,
                0.0,
                0.0,
                -1.0 / (eps * eps),
            ],
        ),
        drift_const: DVector::zeros(3),
        noise: DMatrix::from_row_slice(
            3,
            3,
            &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2f64.sqrt() / eps],
        ),
    });
    MultiscaleModel {
        name: format!("rotation(theta={theta})"),
        coeffs,
        epsilon: 0.1,
        horizon: 1.0,
        burn_in: 1.0,
        // Stationary start: x ~ N(0, I/2), y ~ N(0,1).
        init: InitialLaw::DiagonalGaussian {
            mean: vec![0.0, 0.0, 0.0],
            std: vec![0.5f64.sqrt(), 0.5f64.sqrt(), 1.0],
        },
        x_lo: vec![-10.0, -10.0],
        x_hi: vec![10.0, 10.0],
        y_lo: vec![-8.0],
        y_hi: vec![8.0],
        analytic_cell: Some(analytic),
        linear: Some(linear),
    }
}

/// Look up a catalog model by name with numeric parameters.
pub fn build_model(name: &str, params: &BTreeMap<String, f64>) -> Result<MultiscaleModel> {
    let get = |key: &str, default: f64| params.get(key).copied().unwrap_or(default);
    let model = match name {
        "ou" => ou(get("gamma", 1.0)),
        "ou_reversible" => ou_reversible(),
        "underdamped" => underdamped(get("gamma", 1.0)),
        "rotation" => rotation(get("theta", 0.5)),
        other => {
            return Err(Error::Unknown {
                kind: "model".into(),
                name: other.into(),
            })
        }
    };
    Ok(model)
}

/// Names accepted by [`build_model`].
pub fn model_names() -> Vec<&'static str> {
    vec!["ou", "ou_reversible", "underdamped", "rotation"]
}
