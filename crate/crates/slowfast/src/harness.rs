//! Verification harness: experiment configs (TOML), statistical checks with
//! pinned pass criteria, and a runner that writes results.csv, results.json
//! and report.txt.
//!
//! Check gates:
//! * integral fluctuation: |mean e^{-Z} - 1| <= 3 SE and SE <= 0.05;
//! * martingale increments: E[d e^{-Z} | X] = 0, tested by regressing
//!   checkpoint increments on {1, X, X^2} and requiring every coefficient
//!   within 3 SE of zero;
//! * covariation: empirical QV of e^{-Z} within 10% of int e^{-2Z} (RR')
//!   dt, and normalized cross-covariations below 0.05 for orthogonal pairs;
//! * convergence: two-sample KS p-value above 0.01 between eps-level and
//!   limit samples.

use crate::averaging::{AveragedModel, CellBank, XtGrid};
use crate::catalog::build_model;
use crate::error::Error;
use crate::field::VecField;
use crate::functionals::{
    backward_epsilon_accumulator, forward_epsilon_integrands, joint_density_path,
    make_entropy_production_spec, make_housekeeping_spec, PathFunctional,
};
use crate::model::{ComparableSpec, MultiscaleModel, ParityVector, Side};
use crate::path::{simulate_multiscale, LimitRecord, SimOptions, SimSummary, StoppingRule};
use crate::stats::{exp_neg_mean, ks_two_sample, ols, tail_mass_share, trimmed_mean};
use crate::Result;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

// ---------------------------------------------------------------------------
// Config.
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Deserialize, Serialize)]
pub struct ModelConfig {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    pub eps: Option<f64>,
    pub horizon: Option<f64>,
    pub burn_in: Option<f64>,
}

/// How the comparable process is built.
#[derive(Clone, Debug, Deserialize, Serialize, Default)]
pub struct ComparableConfig {
    /// "identity" | "drift-shift" | "entropy-production" | "housekeeping".
    pub kind: String,
    /// Affine slow-drift shift: b_hat_i = b_i + const_i + x_coef_i x_i + y_coef_i y_0.
    #[serde(default)]
    pub b_shift_const: Vec<f64>,
    #[serde(default)]
    pub b_shift_x: Vec<f64>,
    #[serde(default)]
    pub b_shift_y: Vec<f64>,
    /// "even" (all variables even) or "velocity" (slow even, fast odd).
    #[serde(default)]
    pub parity: Option<String>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
pub struct RunConfig {
    pub paths: usize,
    pub dt: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// "fixed" or "first-exit".
    #[serde(default = "default_rule")]
    pub rule: String,
    pub exit_lo: Option<f64>,
    pub exit_hi: Option<f64>,
    pub cap: Option<f64>,
}

fn default_seed() -> u64 {
    1
}
fn default_rule() -> String {
    "fixed".into()
}

#[derive(Clone, Debug, Deserialize, Serialize, Default)]
pub struct ChecksConfig {
    #[serde(default)]
    pub ift: bool,
    #[serde(default)]
    pub martingale: bool,
    /// Per-path agreement of the direct and split backward accumulators.
    #[serde(default)]
    pub split_agreement: bool,
    #[serde(default = "default_split_tol")]
    pub split_tol: f64,
}

fn default_split_tol() -> f64 {
    0.2
}

#[derive(Clone, Debug, Deserialize, Serialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub comparable: ComparableConfig,
    pub run: RunConfig,
    #[serde(default)]
    pub checks: ChecksConfig,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }
}

// ---------------------------------------------------------------------------
// Check results.
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    pub detail: String,
    pub metrics: BTreeMap<String, f64>,
}

impl CheckResult {
    pub fn line(&self) -> String {
        format!(
            "[{}] {} — {}",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.detail
        )
    }
}

/// Integral-fluctuation gate on a sample of functional values.
pub fn ift_check(name: &str, values: &[f64]) -> CheckResult {
    let (mean, se) = exp_neg_mean(values);
    let dev = (mean - 1.0).abs();
    let pass = dev <= 3.0 * se && se <= 0.05;
    let exp_vals: Vec<f64> = values.iter().map(|&v| (-v).exp()).collect();
    let mut metrics = BTreeMap::new();
    metrics.insert("mean_exp_neg".into(), mean);
    metrics.insert("se".into(), se);
    metrics.insert("deviation".into(), dev);
    metrics.insert("trimmed_mean_0.1pct".into(), trimmed_mean(&exp_vals, 0.001));
    metrics.insert("tail_share_1pct".into(), tail_mass_share(&exp_vals, 0.01));
    CheckResult {
        name: name.into(),
        pass,
        detail: format!("E[e^-Z] = {mean:.5} +- {se:.5} (|dev| = {dev:.2e}, gate 3 SE & SE <= 0.05)"),
        metrics,
    }
}

/// Martingale-increment gate: regress checkpoint increments of e^{-Z} on
/// {1, X, X^2} at the earlier checkpoint; every coefficient must sit within
/// 3 SE of zero for every consecutive checkpoint pair.
pub fn martingale_check(name: &str, summary: &SimSummary, func_idx: &[usize]) -> CheckResult {
    let n_ck = summary.checkpoints.len();
    let mut worst_t = 0.0f64;
    let mut detail_pair = 0usize;
    let mut metrics = BTreeMap::new();
    for k in 0..n_ck.saturating_sub(1) {
        let mut y = Vec::with_capacity(summary.records.len());
        let mut design = Vec::with_capacity(summary.records.len() * 3);
        for rec in &summary.records {
            let z0: f64 = func_idx.iter().map(|&i| rec.checkpoint_values[k][i]).sum();
            let z1: f64 = func_idx.iter().map(|&i| rec.checkpoint_values[k + 1][i]).sum();
            y.push((-z1).exp() - (-z0).exp());
            let x = rec.checkpoint_states[k][0];
            design.extend_from_slice(&[1.0, x, x * x]);
        }
        match ols(&y, &design, 3) {
            Ok(fit) => {
                for i in 0..3 {
                    let t = (fit.coef[i] / fit.coef_se[i]).abs();
                    if t > worst_t {
                        worst_t = t;
                        detail_pair = k;
                    }
                    metrics.insert(format!("pair{}_coef{}_t", k, i), fit.coef[i] / fit.coef_se[i]);
                }
            }
            Err(e) => {
                return CheckResult {
                    name: name.into(),
                    pass: false,
                    detail: format!("regression failed: {e}"),
                    metrics,
                };
            }
        }
    }
    metrics.insert("worst_t_stat".into(), worst_t);
    CheckResult {
        name: name.into(),
        pass: worst_t <= 3.0,
        detail: format!(
            "max |t| of increment regression coefficients = {worst_t:.2} (pair {detail_pair}, gate 3)"
        ),
        metrics,
    }
}

/// Per-path agreement of two accumulators (e.g. direct G vs I + H).
pub fn agreement_check(
    name: &str,
    summary: &SimSummary,
    lhs_idx: usize,
    rhs_idx: &[usize],
    tol: f64,
) -> CheckResult {
    let mut max_abs = 0.0f64;
    let mut sum = 0.0f64;
    for rec in &summary.records {
        let lhs = rec.values[lhs_idx];
        let rhs: f64 = rhs_idx.iter().map(|&i| rec.values[i]).sum();
        let d = (lhs - rhs).abs();
        max_abs = max_abs.max(d);
        sum += d;
    }
    let mean = sum / summary.records.len() as f64;
    let mut metrics = BTreeMap::new();
    metrics.insert("max_abs_diff".into(), max_abs);
    metrics.insert("mean_abs_diff".into(), mean);
    CheckResult {
        name: name.into(),
        pass: max_abs <= tol,
        detail: format!("max per-path |diff| = {max_abs:.3e} (mean {mean:.3e}, gate {tol:.1e})"),
        metrics,
    }
}

/// Exponential-martingale QV gate on a limit-system coordinate: the pooled
/// empirical QV of e^{-Z_j} must be within 10% of the predicted
/// int e^{-2Z_j} (RR')_{jj} dt.
pub fn covariation_check(name: &str, records: &[LimitRecord], dim: usize, coord: usize) -> CheckResult {
    let emp: f64 = records.iter().map(|r| r.covar_exp_emp[coord * dim + coord]).sum();
    let pred: f64 = records.iter().map(|r| r.qv_exp_pred[coord]).sum();
    let ratio = emp / pred;
    let mut metrics = BTreeMap::new();
    metrics.insert("qv_emp".into(), emp);
    metrics.insert("qv_pred".into(), pred);
    metrics.insert("ratio".into(), ratio);
    CheckResult {
        name: name.into(),
        pass: (ratio - 1.0).abs() <= 0.10,
        detail: format!("QV(e^-Z) empirical/predicted = {ratio:.4} (gate within 10%)"),
        metrics,
    }
}

/// Orthogonality gate: the pooled empirical covariation of coordinates (i, j)
/// normalized by the geometric mean of their predicted QVs must be below 5%.
pub fn orthogonality_check(
    name: &str,
    records: &[LimitRecord],
    dim: usize,
    i: usize,
    j: usize,
) -> CheckResult {
    let emp: f64 = records.iter().map(|r| r.covar_emp[i * dim + j]).sum();
    let qi: f64 = records.iter().map(|r| r.covar_pred[i * dim + i]).sum();
    let qj: f64 = records.iter().map(|r| r.covar_pred[j * dim + j]).sum();
    let norm = (qi * qj).sqrt();
    let rel = if norm > 0.0 { emp.abs() / norm } else { emp.abs() };
    let mut metrics = BTreeMap::new();
    metrics.insert("covar_emp".into(), emp);
    metrics.insert("normalizer".into(), norm);
    metrics.insert("relative".into(), rel);
    CheckResult {
        name: name.into(),
        pass: rel <= 0.05,
        detail: format!("normalized cross-covariation = {rel:.4} (gate 0.05)"),
        metrics,
    }
}

/// Noise-splitting gate on the exponentiated coordinates: the per-path
/// realized covariation sum d e^{-Z_i} d e^{-Z_j} must have sample mean
/// within 3 SE of zero at every recorded checkpoint and at the final time.
pub fn exp_covariation_zero_check(
    name: &str,
    records: &[LimitRecord],
    dim: usize,
    i: usize,
    j: usize,
) -> CheckResult {
    let n_ck = records.first().map_or(0, |r| r.checkpoint_covar_exp.len());
    let mut worst = 0.0f64;
    let mut worst_label = String::from("final");
    let mut metrics = BTreeMap::new();
    let mut gate = |vals: &[f64], label: &str, metrics: &mut BTreeMap<String, f64>| {
        let st = crate::stats::summarize(vals);
        let z = if st.se > 0.0 { st.mean.abs() / st.se } else { 0.0 };
        metrics.insert(format!("{label}_mean"), st.mean);
        metrics.insert(format!("{label}_se"), st.se);
        if z > worst {
            worst = z;
            worst_label = label.to_string();
        }
    };
    for k in 0..n_ck {
        let vals: Vec<f64> = records
            .iter()
            .map(|r| r.checkpoint_covar_exp[k][i * dim + j])
            .collect();
        gate(&vals, &format!("ckpt{k}"), &mut metrics);
    }
    let finals: Vec<f64> = records.iter().map(|r| r.covar_exp_emp[i * dim + j]).collect();
    gate(&finals, "final", &mut metrics);
    drop(gate);
    let pass = worst <= 3.0;
    metrics.insert("worst_z".into(), worst);
    CheckResult {
        name: name.into(),
        pass,
        detail: format!(
            "realized covariation of (e^-Z{i}, e^-Z{j}): worst |mean|/SE = {worst:.2} at {worst_label} (gate 3)"
        ),
        metrics,
    }
}

/// Distributional agreement via two-sample Kolmogorov-Smirnov.
pub fn convergence_check(name: &str, sample_a: &[f64], sample_b: &[f64]) -> CheckResult {
    let (d, p) = ks_two_sample(sample_a, sample_b);
    let mut metrics = BTreeMap::new();
    metrics.insert("ks_stat".into(), d);
    metrics.insert("p_value".into(), p);
    metrics.insert("n_a".into(), sample_a.len() as f64);
    metrics.insert("n_b".into(), sample_b.len() as f64);
    CheckResult {
        name: name.into(),
        pass: p > 0.01,
        detail: format!("KS D = {d:.4}, p = {p:.4} (gate p > 0.01)"),
        metrics,
    }
}

// ---------------------------------------------------------------------------
// Experiment runner.
// ---------------------------------------------------------------------------

fn parse_parity(m: usize, n: usize, spec: &Option<String>) -> Result<ParityVector> {
    match spec.as_deref() {
        None | Some("even") => Ok(ParityVector::all_even(m, n)),
        Some("velocity") => Ok(ParityVector::slow_even_fast_odd(m, n)),
        Some(other) => Err(Error::config(format!("unknown parity '{other}'"))),
    }
}

/// Build the comparable described by the config, plus an optional parity.
pub fn build_comparable(
    model: &MultiscaleModel,
    cfg: &ComparableConfig,
) -> Result<ComparableSpec> {
    let cs = &model.coeffs;
    let (m, n) = (cs.m, cs.n);
    match cfg.kind.as_str() {
        "identity" => Ok(ComparableSpec::identity_forward(cs)),
        "drift-shift" => {
            let take = |v: &Vec<f64>, i: usize| v.get(i).copied().unwrap_or(0.0);
            let c0 = cfg.b_shift_const.clone();
            let cx = cfg.b_shift_x.clone();
            let cy = cfg.b_shift_y.clone();
            let base = cs.b.clone();
            let b2 = VecField::new(m, move |x, y, t, out| {
                base.eval_into(x, y, t, out);
                for i in 0..m {
                    out[i] += take(&c0, i)
                        + take(&cx, i) * x[i]
                        + if y.is_empty() { 0.0 } else { take(&cy, i) * y[0] };
                }
            });
            Ok(ComparableSpec {
                name: "drift-shift".into(),
                side: Side::Forward,
                b2,
                g2: cs.g.clone(),
                f2: None,
                parity: None,
            })
        }
        "entropy-production" => {
            let parity = parse_parity(m, n, &cfg.parity)?;
            Ok(make_entropy_production_spec(cs, &parity))
        }
        "housekeeping" => {
            let parity = parse_parity(m, n, &cfg.parity)?;
            let bank = CellBank::new(
                cs.clone(),
                model.analytic_cell.clone(),
                model.fast_grid(129),
                None,
            );
            let grid = XtGrid::line(-4.0, 4.0, 33, vec![0.0]);
            let grid = if m == 1 {
                grid
            } else {
                // Multi-d slow: sample a small tensor cross for the affine fit.
                let mut pts = Vec::new();
                for i in 0..m {
                    for s in [-1.0, -0.5, 0.5, 1.0] {
                        let mut p = vec![0.0; m];
                        p[i] = s;
                        pts.push(p);
                    }
                }
                pts.push(vec![0.25; m]);
                pts.push(vec![0.0; m]);
                XtGrid {
                    xpoints: pts,
                    ts: vec![0.0],
                }
            };
            let mut avg = AveragedModel::build(&bank, None, grid)?;
            avg.solve_mu()?;
            let mu = avg.mu.clone().expect("solve_mu populates mu");
            make_housekeeping_spec(cs, &parity, &mu, None)
        }
        other => Err(Error::Unknown {
            kind: "comparable".into(),
            name: other.into(),
        }),
    }
}

fn build_rule(model: &MultiscaleModel, run: &RunConfig) -> Result<StoppingRule> {
    match run.rule.as_str() {
        "fixed" => Ok(StoppingRule::FixedTime(model.horizon)),
        "first-exit" => Ok(StoppingRule::FirstExit {
            x_lo: run.exit_lo.ok_or_else(|| Error::config("first-exit needs exit_lo"))?,
            x_hi: run.exit_hi.ok_or_else(|| Error::config("first-exit needs exit_hi"))?,
            cap: run.cap.unwrap_or(4.0 * model.horizon),
        }),
        other => Err(Error::config(format!("unknown stopping rule '{other}'"))),
    }
}

#[derive(Debug, Serialize)]
pub struct ExperimentReport {
    pub model: String,
    pub comparable: String,
    pub n_paths: usize,
    pub truncated: usize,
    pub functional_names: Vec<String>,
    pub checks: Vec<CheckResult>,
    pub all_pass: bool,
}

/// Run one configured experiment end to end and write results.csv (per-path
/// values), results.json (checks and metrics) and report.txt (one PASS/FAIL
/// line per check) into `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentReport> {
    let mut model = build_model(&cfg.model.name, &cfg.model.params)?;
    if let Some(e) = cfg.model.eps {
        model.epsilon = e;
    }
    if let Some(t) = cfg.model.horizon {
        model.horizon = t;
    }
    if let Some(b) = cfg.model.burn_in {
        model.burn_in = b;
    }
    let comparable = build_comparable(&model, &cfg.comparable)?;

    let mut functionals: Vec<PathFunctional> = Vec::new();
    match comparable.side {
        Side::Forward => {
            functionals.push(forward_epsilon_integrands(&model.coeffs, &comparable)?);
        }
        Side::Backward => {
            let horizon = match build_rule(&model, &cfg.run)? {
                StoppingRule::FixedTime(t) => t,
                StoppingRule::FirstExit { cap, .. } => cap,
            };
            let dens = Arc::new(joint_density_path(&model, horizon)?);
            let acc = backward_epsilon_accumulator(&model, &comparable, dens)?;
            functionals.push(acc.direct);
            functionals.push(acc.i_term);
            functionals.push(acc.h_term);
        }
    }
    let func_names: Vec<String> = functionals.iter().map(|f| f.name.clone()).collect();

    let opts = SimOptions {
        n_paths: cfg.run.paths,
        dt: cfg.run.dt,
        seed: cfg.run.seed,
        rule: build_rule(&model, &cfg.run)?,
        checkpoints: {
            let t = build_rule(&model, &cfg.run)?.horizon();
            (1..=4).map(|k| t * k as f64 / 4.0).collect()
        },
    };
    let summary = simulate_multiscale(&model, &functionals, &opts)?;

    let mut checks = Vec::new();
    // Backward runs gate on the reduced split I + H (indices 1, 2); the
    // direct accumulator (index 0) has stiff integrands and is kept for the
    // agreement cross-check only.
    let (gate_idx, gate_name): (Vec<usize>, String) = if functionals.len() == 3 {
        (vec![1, 2], format!("{}+{}", func_names[1], func_names[2]))
    } else {
        (vec![0], func_names[0].clone())
    };
    let gate_values: Vec<f64> = summary
        .records
        .iter()
        .map(|r| gate_idx.iter().map(|&i| r.values[i]).sum())
        .collect();
    if cfg.checks.ift {
        checks.push(ift_check(&format!("ift:{gate_name}"), &gate_values));
    }
    if cfg.checks.martingale {
        checks.push(martingale_check(
            &format!("martingale:{gate_name}"),
            &summary,
            &gate_idx,
        ));
    }
    if cfg.checks.split_agreement && functionals.len() == 3 {
        checks.push(agreement_check(
            "split-agreement:G=I+H",
            &summary,
            0,
            &[1, 2],
            cfg.checks.split_tol,
        ));
    }
    let all_pass = checks.iter().all(|c| c.pass);

    std::fs::create_dir_all(out_dir)?;
    write_results_csv(&out_dir.join("results.csv"), &summary, &func_names)?;
    write_summary_csv(
        &out_dir.join("summary.csv"),
        &summary,
        &func_names,
        &cfg.run,
        model.epsilon,
    )?;
    let report = ExperimentReport {
        model: model.name.clone(),
        comparable: comparable.name.clone(),
        n_paths: summary.records.len(),
        truncated: summary.truncated,
        functional_names: func_names,
        checks,
        all_pass,
    };
    let json = serde_json::to_string_pretty(&report)?;
    std::fs::write(out_dir.join("results.json"), json)?;
    let mut txt = std::fs::File::create(out_dir.join("report.txt"))?;
    writeln!(txt, "model: {}   comparable: {}", report.model, report.comparable)?;
    writeln!(
        txt,
        "paths: {} finished, {} truncated",
        report.n_paths, report.truncated
    )?;
    for c in &report.checks {
        writeln!(txt, "{}", c.line())?;
    }
    writeln!(txt, "overall: {}", if report.all_pass { "PASS" } else { "FAIL" })?;
    Ok(report)
}

fn write_results_csv(path: &Path, summary: &SimSummary, names: &[String]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    let mut header = vec!["stop_time".to_string()];
    let d = summary.records.first().map(|r| r.end.len()).unwrap_or(0);
    for i in 0..d {
        header.push(format!("end_{i}"));
    }
    for n in names {
        header.push(n.clone());
    }
    writeln!(f, "{}", header.join(","))?;
    for rec in &summary.records {
        let mut row = vec![format!("{:.17e}", rec.stop_time)];
        for v in &rec.end {
            row.push(format!("{v:.17e}"));
        }
        for v in &rec.values {
            row.push(format!("{v:.17e}"));
        }
        writeln!(f, "{}", row.join(","))?;
    }
    Ok(())
}

/// One row per functional: the exponential-mean estimate E[e^{-Z}] with its
/// standard error and the run parameters that produced it.
fn write_summary_csv(
    path: &Path,
    summary: &SimSummary,
    names: &[String],
    run: &RunConfig,
    eps: f64,
) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "functional,rule,estimate,se,n_paths,dt,eps,flags")?;
    for (j, name) in names.iter().enumerate() {
        let zs: Vec<f64> = summary.records.iter().map(|r| r.values[j]).collect();
        let (mean, se) = crate::stats::exp_neg_mean(&zs);
        let flags = if summary.truncated > 0 {
            format!("truncated={}", summary.truncated)
        } else {
            "ok".into()
        };
        writeln!(
            f,
            "{name},{},{mean:.10e},{se:.10e},{},{:.3e},{eps:.3e},{flags}",
            run.rule,
            summary.records.len(),
            run.dt,
        )?;
    }
    Ok(())
}
