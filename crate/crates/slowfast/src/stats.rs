//! Small statistics toolbox backing the verification harness: sample
//! summaries, two-sample Kolmogorov-Smirnov, and ordinary least squares with
//! coefficient standard errors.

use crate::error::Error;
use crate::Result;
use nalgebra::{DMatrix, DVector};

/// Mean, standard deviation and standard error of a sample.
#[derive(Clone, Copy, Debug)]
pub struct SampleStats {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub se: f64,
    pub min: f64,
    pub max: f64,
}

pub fn summarize(xs: &[f64]) -> SampleStats {
    let n = xs.len();
    assert!(n > 1, "summarize needs at least two points");
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / (n as f64 - 1.0);
    let std = var.sqrt();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &x in xs {
        lo = lo.min(x);
        hi = hi.max(x);
    }
    SampleStats {
        n,
        mean,
        std,
        se: std / (n as f64).sqrt(),
        min: lo,
        max: hi,
    }
}

/// Mean after symmetrically trimming a fraction from each tail.  Used as a
/// heavy-tail diagnostic next to the plain mean, never as the gate.
pub fn trimmed_mean(xs: &[f64], trim_frac: f64) -> f64 {
    let mut s: Vec<f64> = xs.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let k = ((s.len() as f64) * trim_frac).floor() as usize;
    let kept = &s[k..s.len() - k];
    kept.iter().sum::<f64>() / kept.len() as f64
}

/// Share of the total sum carried by the largest `frac` of |x| values; near 1
/// means the sample mean is dominated by a few extreme paths.
pub fn tail_mass_share(xs: &[f64], frac: f64) -> f64 {
    let mut s: Vec<f64> = xs.to_vec();
    s.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    let k = ((s.len() as f64) * frac).ceil().max(1.0) as usize;
    let total: f64 = s.iter().map(|v| v.abs()).sum();
    if total == 0.0 {
        return 0.0;
    }
    s[s.len() - k..].iter().map(|v| v.abs()).sum::<f64>() / total
}

/// Two-sample Kolmogorov-Smirnov statistic and asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut sa: Vec<f64> = a.to_vec();
    let mut sb: Vec<f64> = b.to_vec();
    sa.sort_by(|x, y| x.total_cmp(y));
    sb.sort_by(|x, y| x.total_cmp(y));
    let (na, nb) = (sa.len(), sb.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut d = 0.0f64;
    while i < na && j < nb {
        let xa = sa[i];
        let xb = sb[j];
        if xa <= xb {
            i += 1;
        }
        if xb <= xa {
            j += 1;
        }
        let gap = (i as f64 / na as f64 - j as f64 / nb as f64).abs();
        d = d.max(gap);
    }
    let ne = (na as f64 * nb as f64) / (na as f64 + nb as f64);
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    (d, ks_q(lambda))
}

/// Kolmogorov survival function Q(lambda) = 2 sum (-1)^{k-1} exp(-2 k^2 l^2).
fn ks_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=100 {
        let term = sign * (-2.0 * (k as f64) * (k as f64) * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-12 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// OLS fit result.
#[derive(Clone, Debug)]
pub struct OlsFit {
    pub coef: Vec<f64>,
    pub coef_se: Vec<f64>,
    pub r2: f64,
    pub resid_std: f64,
}

/// Ordinary least squares of y on the rows of `design` (n x k, row-major),
/// with homoskedastic coefficient standard errors.
pub fn ols(y: &[f64], design: &[f64], k: usize) -> Result<OlsFit> {
    let n = y.len();
    if n * k != design.len() || n <= k {
        return Err(Error::dim("ols: design shape mismatch or too few rows"));
    }
    let x = DMatrix::from_row_slice(n, k, design);
    let yv = DVector::from_column_slice(y);
    let xtx = x.transpose() * &x;
    let xty = x.transpose() * &yv;
    let chol = xtx.clone().cholesky().ok_or_else(|| Error::LinearSolve {
        context: "ols".into(),
        detail: "singular normal equations".into(),
    })?;
    let coef = chol.solve(&xty);
    let resid = &yv - &x * &coef;
    let dof = (n - k) as f64;
    let s2 = resid.dot(&resid) / dof;
    let xtx_inv = chol.inverse();
    let coef_se: Vec<f64> = (0..k).map(|i| (s2 * xtx_inv[(i, i)]).sqrt()).collect();
    let ybar = yv.sum() / n as f64;
    let tss: f64 = yv.iter().map(|v| (v - ybar) * (v - ybar)).sum();
    let r2 = if tss > 0.0 {
        1.0 - resid.dot(&resid) / tss
    } else {
        1.0
    };
    Ok(OlsFit {
        coef: coef.iter().copied().collect(),
        coef_se,
        r2,
        resid_std: s2.sqrt(),
    })
}

/// Weighted average of exp(-x) with standard error (the integral-fluctuation
/// estimator); returns (mean, se).
pub fn exp_neg_mean(xs: &[f64]) -> (f64, f64) {
    let vals: Vec<f64> = xs.iter().map(|&x| (-x).exp()).collect();
    let st = summarize(&vals);
    (st.mean, st.se)
}
