//! Monte Carlo path engine: Euler-Maruyama for the two-scale system with
//! functional accumulation, and a driver for the limit (reduced) systems with
//! quadratic-variation bookkeeping.
//!
//! Reproducibility: every path gets its own ChaCha8 stream
//! (`seed_from_u64(seed)` + `set_stream(path_index)`), so results are
//! independent of the rayon schedule and of `n_paths`.

use crate::error::Error;
use crate::functionals::{Endpoint, LimitSystem, PathFunctional, MAX_DIM};
use crate::model::{InitialLaw, MultiscaleModel};
use crate::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

/// When a path ends.
#[derive(Clone, Copy, Debug)]
pub enum StoppingRule {
    /// Run to a fixed horizon.
    FixedTime(f64),
    /// Stop when the first slow coordinate leaves (x_lo, x_hi), capped at
    /// `cap` so every path terminates.
    FirstExit { x_lo: f64, x_hi: f64, cap: f64 },
}

impl StoppingRule {
    pub fn horizon(&self) -> f64 {
        match self {
            StoppingRule::FixedTime(t) => *t,
            StoppingRule::FirstExit { cap, .. } => *cap,
        }
    }
}

/// Simulation controls for the eps-level engine.
#[derive(Clone, Debug)]
pub struct SimOptions {
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
    pub rule: StoppingRule,
    /// Times in (0, horizon] at which running functional values and states
    /// are recorded (for martingale-increment checks).
    pub checkpoints: Vec<f64>,
}

impl SimOptions {
    pub fn fixed(n_paths: usize, dt: f64, seed: u64, horizon: f64) -> Self {
        SimOptions {
            n_paths,
            dt,
            seed,
            rule: StoppingRule::FixedTime(horizon),
            checkpoints: (1..=4).map(|k| horizon * k as f64 / 4.0).collect(),
        }
    }
}

/// One simulated path: start/end joint states, stopping time, final
/// functional values (boundary included), and per-checkpoint snapshots.
#[derive(Clone, Debug)]
pub struct TrajectoryRecord {
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    pub stop_time: f64,
    pub values: Vec<f64>,
    /// checkpoint_values[k][j] = functional j at checkpoint k (boundary
    /// applied up to that time); frozen at the stop state for stopped paths.
    pub checkpoint_values: Vec<Vec<f64>>,
    pub checkpoint_states: Vec<Vec<f64>>,
}

/// All finished paths plus truncation accounting.
#[derive(Debug)]
pub struct SimSummary {
    pub records: Vec<TrajectoryRecord>,
    pub truncated: usize,
    pub n_requested: usize,
    pub checkpoints: Vec<f64>,
}

/// Fraction of paths allowed to hit the state-space truncation box before the
/// run is declared invalid.
pub const TRUNCATION_LIMIT: f64 = 0.01;

struct EngineSetup {
    m: usize,
    n: usize,
    p: usize,
    eps: f64,
    const_noise: bool,
    /// Row-major (m+n) x p scaled noise when constant.
    noise_rm: Vec<f64>,
}

fn setup(model: &MultiscaleModel) -> Result<EngineSetup> {
    let cs = &model.coeffs;
    let (m, n, p) = (cs.m, cs.n, cs.p);
    if m + n > MAX_DIM || p > MAX_DIM {
        return Err(Error::dim("state/noise dimension exceeds engine buffers"));
    }
    let const_noise = cs.sigma.is_constant() && cs.eta.is_constant();
    let mut noise_rm = vec![0.0; (m + n) * p];
    if const_noise {
        let z = vec![0.0; m.max(n)];
        let sig = cs.sigma.eval(&z[..m], &z[..n], 0.0);
        let eta = cs.eta.eval(&z[..m], &z[..n], 0.0);
        for i in 0..m {
            for j in 0..p {
                noise_rm[i * p + j] = sig[(i, j)];
            }
        }
        for i in 0..n {
            for j in 0..p {
                noise_rm[(m + i) * p + j] = eta[(i, j)] / model.epsilon;
            }
        }
    }
    Ok(EngineSetup {
        m,
        n,
        p,
        eps: model.epsilon,
        const_noise,
        noise_rm,
    })
}

#[inline]
fn drift_into(
    model: &MultiscaleModel,
    su: &EngineSetup,
    x: &[f64],
    y: &[f64],
    t: f64,
    out: &mut [f64],
) {
    let cs = &model.coeffs;
    let (m, n) = (su.m, su.n);
    let mut buf = [0.0; MAX_DIM];
    cs.b.eval_into(x, y, t, &mut out[..m]);
    cs.f.eval_into(x, y, t, &mut buf[..m]);
    for i in 0..m {
        out[i] += buf[i] / su.eps;
    }
    cs.g.eval_into(x, y, t, &mut out[m..m + n]);
    cs.c.eval_into(x, y, t, &mut buf[..n]);
    for i in 0..n {
        out[m + i] = out[m + i] / su.eps + buf[i] / (su.eps * su.eps);
    }
}

fn draw_initial(init: &InitialLaw, rng: &mut ChaCha8Rng, out: &mut [f64]) {
    match init {
        InitialLaw::Point(z) => out[..z.len()].copy_from_slice(z),
        InitialLaw::DiagonalGaussian { mean, std } => {
            for i in 0..mean.len() {
                let g: f64 = rng.sample(StandardNormal);
                out[i] = mean[i] + std[i] * g;
            }
        }
    }
}

/// Run the two-scale system under Euler-Maruyama, accumulating the given
/// functionals.  Requires dt <= eps^2 / 10 so the fast relaxation is
/// resolved; burn-in (clock running from -burn_in to 0) precedes
/// accumulation.  Paths leaving the model's truncation box are dropped; more
/// than [`TRUNCATION_LIMIT`] of them is an error, as is any non-finite
/// functional evaluation.
pub fn simulate_multiscale(
    model: &MultiscaleModel,
    functionals: &[PathFunctional],
    opts: &SimOptions,
) -> Result<SimSummary> {
    let su = setup(model)?;
    if opts.dt > 0.1 * su.eps * su.eps + 1e-15 {
        return Err(Error::config(format!(
            "dt = {} too coarse for eps = {} (need dt <= eps^2/10 = {})",
            opts.dt,
            su.eps,
            0.1 * su.eps * su.eps
        )));
    }
    for f in functionals {
        if f.noise_dim != su.p {
            return Err(Error::dim("functional noise_dim must match model p"));
        }
    }
    let horizon = opts.rule.horizon();
    let n_steps = (horizon / opts.dt).round().max(1.0) as usize;
    let burn_steps = (model.burn_in / opts.dt).round() as usize;
    let mut ckpt_steps: Vec<usize> = opts
        .checkpoints
        .iter()
        .map(|&t| ((t / opts.dt).round() as usize).min(n_steps))
        .collect();
    ckpt_steps.sort_unstable();

    let results: Vec<Result<Option<TrajectoryRecord>>> = (0..opts.n_paths as u64)
        .into_par_iter()
        .map(|path| {
            simulate_one(model, &su, functionals, opts, path, n_steps, burn_steps, &ckpt_steps)
        })
        .collect();

    let mut records = Vec::with_capacity(opts.n_paths);
    let mut truncated = 0usize;
    for r in results {
        match r? {
            Some(rec) => records.push(rec),
            None => truncated += 1,
        }
    }
    let frac = truncated as f64 / opts.n_paths as f64;
    if frac > TRUNCATION_LIMIT {
        return Err(Error::Truncation {
            frac,
            limit: TRUNCATION_LIMIT,
        });
    }
    Ok(SimSummary {
        records,
        truncated,
        n_requested: opts.n_paths,
        checkpoints: ckpt_steps.iter().map(|&k| k as f64 * opts.dt).collect(),
    })
}

#[allow(clippy::too_many_arguments)]
fn simulate_one(
    model: &MultiscaleModel,
    su: &EngineSetup,
    functionals: &[PathFunctional],
    opts: &SimOptions,
    path: u64,
    n_steps: usize,
    burn_steps: usize,
    ckpt_steps: &[usize],
) -> Result<Option<TrajectoryRecord>> {
    let (m, n, p) = (su.m, su.n, su.p);
    let d = m + n;
    let dt = opts.dt;
    let sqdt = dt.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(path);

    let mut z = [0.0; MAX_DIM];
    draw_initial(&model.init, &mut rng, &mut z[..d]);

    let mut drift = [0.0; MAX_DIM];
    let mut dw = [0.0; MAX_DIM];
    let mut znew = [0.0; MAX_DIM];
    let mut noise_rm = [0.0; MAX_DIM * MAX_DIM];
    noise_rm[..d * p].copy_from_slice(&su.noise_rm[..d * p]);
    let mut row = [0.0; MAX_DIM];
    let nf = functionals.len();
    let mut vals = vec![0.0f64; nf];

    let in_box = |z: &[f64]| -> bool {
        for i in 0..m {
            if z[i] < model.x_lo[i] || z[i] > model.x_hi[i] {
                return false;
            }
        }
        for i in 0..n {
            if z[m + i] < model.y_lo[i] || z[m + i] > model.y_hi[i] {
                return false;
            }
        }
        true
    };

    // Burn-in: clock from -burn_in to 0, no accumulation.
    let mut t = -(burn_steps as f64) * dt;
    for _ in 0..burn_steps {
        let (x, y) = z[..d].split_at(m);
        drift_into(model, su, x, y, t, &mut drift);
        if !su.const_noise {
            eval_noise(model, su, x, y, t, &mut noise_rm);
        }
        for k in 0..p {
            dw[k] = sqdt * rng.sample::<f64, _>(StandardNormal);
        }
        for i in 0..d {
            let mut s = z[i] + drift[i] * dt;
            for k in 0..p {
                s += noise_rm[i * p + k] * dw[k];
            }
            znew[i] = s;
        }
        z[..d].copy_from_slice(&znew[..d]);
        t += dt;
        if !in_box(&z[..d]) {
            return Ok(None);
        }
    }

    let start: Vec<f64> = z[..d].to_vec();
    let mut ckpt_vals: Vec<Vec<f64>> = Vec::with_capacity(ckpt_steps.len());
    let mut ckpt_states: Vec<Vec<f64>> = Vec::with_capacity(ckpt_steps.len());
    let mut ckpt_iter = ckpt_steps.iter().peekable();
    let mut stop_time = n_steps as f64 * dt;
    let mut stopped = false;

    let mut t = 0.0;
    for step in 1..=n_steps {
        if !stopped {
            let (x, y) = z[..d].split_at(m);
            drift_into(model, su, x, y, t, &mut drift);
            if !su.const_noise {
                eval_noise(model, su, x, y, t, &mut noise_rm);
            }
            for k in 0..p {
                dw[k] = sqdt * rng.sample::<f64, _>(StandardNormal);
            }
            // Left-endpoint functionals before the move.
            for (j, func) in functionals.iter().enumerate() {
                if func.endpoint == Endpoint::Left {
                    let dterm = (func.eval)(x, y, t, &mut row[..p]);
                    let mut inc = dterm * dt;
                    for k in 0..p {
                        inc += row[k] * dw[k];
                    }
                    vals[j] += inc;
                    if !vals[j].is_finite() {
                        return Err(Error::DivergentFunctional { deviation: t });
                    }
                }
            }
            for i in 0..d {
                let mut s = z[i] + drift[i] * dt;
                for k in 0..p {
                    s += noise_rm[i * p + k] * dw[k];
                }
                znew[i] = s;
            }
            // Right-endpoint functionals at the post-step state, same dW.
            let (xn, yn) = znew[..d].split_at(m);
            let tn = t + dt;
            for (j, func) in functionals.iter().enumerate() {
                if func.endpoint == Endpoint::Right {
                    let dterm = (func.eval)(xn, yn, tn, &mut row[..p]);
                    let mut inc = dterm * dt;
                    for k in 0..p {
                        inc += row[k] * dw[k];
                    }
                    vals[j] += inc;
                    if !vals[j].is_finite() {
                        return Err(Error::DivergentFunctional { deviation: t });
                    }
                }
            }
            z[..d].copy_from_slice(&znew[..d]);
            t = tn;
            if !in_box(&z[..d]) {
                return Ok(None);
            }
            if let StoppingRule::FirstExit { x_lo, x_hi, .. } = opts.rule {
                if z[0] <= x_lo || z[0] >= x_hi {
                    stopped = true;
                    stop_time = t;
                }
            }
        }
        while let Some(&&cs) = ckpt_iter.peek() {
            if cs == step {
                let tc = if stopped { stop_time } else { t };
                let mut snap = vals.clone();
                for (j, func) in functionals.iter().enumerate() {
                    if let Some(bf) = &func.boundary {
                        snap[j] += bf(&start, 0.0, &z[..d], tc)?;
                    }
                }
                ckpt_vals.push(snap);
                ckpt_states.push(z[..d].to_vec());
                ckpt_iter.next();
            } else {
                break;
            }
        }
        if stopped && ckpt_iter.peek().is_none() {
            break;
        }
    }

    if !stopped {
        stop_time = t;
    }
    for (j, func) in functionals.iter().enumerate() {
        if let Some(bf) = &func.boundary {
            vals[j] += bf(&start, 0.0, &z[..d], stop_time)?;
        }
        if !vals[j].is_finite() {
            return Err(Error::DivergentFunctional {
                deviation: stop_time,
            });
        }
    }

    Ok(Some(TrajectoryRecord {
        start,
        end: z[..d].to_vec(),
        stop_time,
        values: vals,
        checkpoint_values: ckpt_vals,
        checkpoint_states: ckpt_states,
    }))
}

#[inline]
fn eval_noise(
    model: &MultiscaleModel,
    su: &EngineSetup,
    x: &[f64],
    y: &[f64],
    t: f64,
    out: &mut [f64],
) {
    let (m, n, p) = (su.m, su.n, su.p);
    let sig = model.coeffs.sigma.eval(x, y, t);
    let eta = model.coeffs.eta.eval(x, y, t);
    for i in 0..m {
        for j in 0..p {
            out[i * p + j] = sig[(i, j)];
        }
    }
    for i in 0..n {
        for j in 0..p {
            out[(m + i) * p + j] = eta[(i, j)] / su.eps;
        }
    }
}

// ---------------------------------------------------------------------------
// Limit-system driver.
// ---------------------------------------------------------------------------

/// Controls for [`simulate_limit`].
#[derive(Clone, Debug)]
pub struct LimitOptions {
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
    /// Fixed horizon or first exit of coordinate 0 (the slow variable).
    pub rule: StoppingRule,
    /// Law of the slow coordinates; functional coordinates start at 0.
    pub init: InitialLaw,
    /// Number of slow coordinates covered by `init`.
    pub slow_dim: usize,
    pub checkpoints: Vec<f64>,
}

/// One limit path with quadratic-variation bookkeeping.
#[derive(Clone, Debug)]
pub struct LimitRecord {
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    pub stop_time: f64,
    /// Empirical covariation sum_steps dZ_i dZ_j (row-major dim x dim).
    pub covar_emp: Vec<f64>,
    /// Predicted covariation int (R R')_{ij} dt along the path.
    pub covar_pred: Vec<f64>,
    /// Realized covariation of the exponentiated coordinates:
    /// sum_steps d e^{-Z_i} d e^{-Z_j} (row-major dim x dim).
    pub covar_exp_emp: Vec<f64>,
    /// Predicted QV of exp(-Z_j): int e^{-2 Z_j} (R R')_{jj} dt.
    pub qv_exp_pred: Vec<f64>,
    pub checkpoint_states: Vec<Vec<f64>>,
    /// Running copy of `covar_exp_emp` at each checkpoint.
    pub checkpoint_covar_exp: Vec<Vec<f64>>,
}

/// Euler-Maruyama for a reduced/extended limit system, tracking empirical and
/// predicted covariations so orthogonality and exponential-martingale QV
/// identities can be tested without storing full paths.
pub fn simulate_limit(sys: &LimitSystem, opts: &LimitOptions) -> Result<Vec<LimitRecord>> {
    let d = sys.dim;
    let q = sys.noise_dim;
    if d > MAX_DIM || q > MAX_DIM {
        return Err(Error::dim("limit system dimension exceeds engine buffers"));
    }
    let n_steps = (opts.rule.horizon() / opts.dt).round().max(1.0) as usize;
    let mut ckpt_steps: Vec<usize> = opts
        .checkpoints
        .iter()
        .map(|&t| ((t / opts.dt).round() as usize).min(n_steps))
        .collect();
    ckpt_steps.sort_unstable();

    let drift = sys.drift.clone();
    let noise = sys.noise.clone();
    (0..opts.n_paths as u64)
        .into_par_iter()
        .map(move |path| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(path);
            let mut z = [0.0; MAX_DIM];
            draw_initial(&opts.init, &mut rng, &mut z[..opts.slow_dim]);
            let start = z[..d].to_vec();

            let mut mu = [0.0; MAX_DIM];
            let mut r = [0.0; MAX_DIM * MAX_DIM];
            let mut dw = [0.0; MAX_DIM];
            let mut dz = [0.0; MAX_DIM];
            let mut covar_emp = vec![0.0; d * d];
            let mut covar_pred = vec![0.0; d * d];
            let mut covar_exp_emp = vec![0.0; d * d];
            let mut qv_exp_pred = vec![0.0; d];
            let mut ckpt_states = Vec::with_capacity(ckpt_steps.len());
            let mut ckpt_covar = Vec::with_capacity(ckpt_steps.len());
            let mut ckpt_iter = ckpt_steps.iter().peekable();

            let sqdt = opts.dt.sqrt();
            let mut t = 0.0;
            let mut stop_time = opts.rule.horizon();
            let mut stopped = false;
            for step in 1..=n_steps {
                if !stopped {
                    drift(&z[..d], t, &mut mu[..d]);
                    noise(&z[..d], t, &mut r[..d * q]);
                    if mu[..d].iter().chain(r[..d * q].iter()).any(|v| !v.is_finite()) {
                        return Err(Error::DivergentFunctional { deviation: t });
                    }
                    for k in 0..q {
                        dw[k] = sqdt * rng.sample::<f64, _>(StandardNormal);
                    }
                    for i in 0..d {
                        let mut s = mu[i] * opts.dt;
                        for k in 0..q {
                            s += r[i * q + k] * dw[k];
                        }
                        dz[i] = s;
                    }
                    for i in 0..d {
                        let dei = (-(z[i] + dz[i])).exp() - (-z[i]).exp();
                        for j in 0..d {
                            covar_emp[i * d + j] += dz[i] * dz[j];
                            let dej = (-(z[j] + dz[j])).exp() - (-z[j]).exp();
                            covar_exp_emp[i * d + j] += dei * dej;
                            let mut rr = 0.0;
                            for k in 0..q {
                                rr += r[i * q + k] * r[j * q + k];
                            }
                            covar_pred[i * d + j] += rr * opts.dt;
                            if i == j {
                                let e0 = (-z[j]).exp();
                                qv_exp_pred[j] += e0 * e0 * rr * opts.dt;
                            }
                        }
                    }
                    for i in 0..d {
                        z[i] += dz[i];
                    }
                }
                t += opts.dt;
                if !stopped {
                    if let StoppingRule::FirstExit { x_lo, x_hi, .. } = opts.rule {
                        if z[0] <= x_lo || z[0] >= x_hi {
                            stopped = true;
                            stop_time = t;
                        }
                    }
                }
                while let Some(&&cs) = ckpt_iter.peek() {
                    if cs == step {
                        ckpt_states.push(z[..d].to_vec());
                        ckpt_covar.push(covar_exp_emp.clone());
                        ckpt_iter.next();
                    } else {
                        break;
                    }
                }
            }
            Ok(LimitRecord {
                start,
                end: z[..d].to_vec(),
                stop_time,
                covar_emp,
                covar_pred,
                covar_exp_emp,
                qv_exp_pred,
                checkpoint_states: ckpt_states,
                checkpoint_covar_exp: ckpt_covar,
            })
        })
        .collect()
}
