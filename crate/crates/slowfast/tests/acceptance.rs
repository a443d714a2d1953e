//! Acceptance battery: one test per release criterion, each printing a single
//! PASS/FAIL line (run with `--nocapture` to see them on success).
//!
//! Criteria are numbered; every gate is pinned in code next to the assert.
//! The Monte Carlo gates use fixed seeds, so failures are reproducible.

use slowfast::averaging::{averaged_at, AveragedModel, CellBank, ExtendedSystem, XtGrid};
use slowfast::catalog;
use slowfast::cell::build_cell;
use slowfast::field::VecField;
use slowfast::functionals::{
    backward_epsilon_accumulator, forward_epsilon_integrands, forward_unreduced_at,
    joint_density_path, limit_backward_decomposition, limit_forward_decomposition,
    make_entropy_production_spec,
};
use slowfast::harness::{
    build_comparable, exp_covariation_zero_check, ift_check, ComparableConfig,
};
use slowfast::model::{
    check_compatible_conditions, ComparableSpec, InitialLaw, MultiscaleModel, ParityVector, Side,
};
use slowfast::path::{
    simulate_limit, simulate_multiscale, LimitOptions, LimitRecord, SimOptions, StoppingRule,
};
use slowfast::stats::{ks_two_sample, ols, summarize};
use std::sync::Arc;
use std::time::Instant;

fn verdict(num: u32, name: &str, pass: bool, detail: &str) {
    println!(
        "[{}] criterion {num} ({name}) — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {num} ({name}) failed: {detail}");
}

/// Sample variance with the standard error of the variance estimate
/// (fourth-moment formula).
fn variance_with_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|&x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let m4 = xs.iter().map(|&x| (x - mean).powi(4)).sum::<f64>() / n;
    let se = ((m4 - var * var).max(0.0) / n).sqrt();
    (var, se)
}

/// Forward comparable b_hat = b + c0 + cx x on a 1-D slow model.
fn slow_shift_comparable(model: &MultiscaleModel, c0: f64, cx: f64) -> ComparableSpec {
    let base = model.coeffs.b.clone();
    ComparableSpec {
        name: "drift-shift".into(),
        side: Side::Forward,
        b2: VecField::new(1, move |x, y, t, out| {
            base.eval_into(x, y, t, out);
            out[0] += c0 + cx * x[0];
        }),
        g2: model.coeffs.g.clone(),
        f2: None,
        parity: None,
    }
}

fn analytic_bank(model: &MultiscaleModel, f_tilde: Option<VecField>) -> CellBank {
    CellBank::new(
        model.coeffs.clone(),
        model.analytic_cell.clone(),
        model.fast_grid(257),
        f_tilde,
    )
}

/// Averaged + extended forward limit system for a 1-D slow model.
fn forward_limit_system(
    bank: &CellBank,
    cmp: &ComparableSpec,
    x_lo: f64,
    x_hi: f64,
) -> (Arc<AveragedModel>, slowfast::functionals::LimitSystem) {
    let grid = XtGrid::line(x_lo, x_hi, 33, vec![0.0]);
    let avg = Arc::new(AveragedModel::build(bank, Some(cmp), grid.clone()).unwrap());
    let ext = Arc::new(ExtendedSystem::build_forward(bank, cmp, grid).unwrap());
    let sys = limit_forward_decomposition(avg.clone(), ext).unwrap();
    (avg, sys)
}

/// Averaged (with reduced stationary density) + extended backward limit
/// system for a 1-D slow model.
fn backward_limit_system(
    bank: &CellBank,
    cmp: &ComparableSpec,
    x_lo: f64,
    x_hi: f64,
) -> (Arc<AveragedModel>, slowfast::functionals::LimitSystem) {
    let grid = XtGrid::line(x_lo, x_hi, 33, vec![0.0]);
    let mut avg = AveragedModel::build(bank, Some(cmp), grid.clone()).unwrap();
    avg.solve_mu().unwrap();
    let avg = Arc::new(avg);
    let ext = Arc::new(ExtendedSystem::build_backward(bank, cmp, grid).unwrap());
    let sys = limit_backward_decomposition(avg.clone(), ext).unwrap();
    (avg, sys)
}

/// Assemble the limit backward functional G = log mu(X_0) - log mu(X_T) + H
/// from a record of the [X, H, G1] system, at the final state.
fn limit_g(avg: &AveragedModel, rec: &LimitRecord) -> f64 {
    let mu = avg.mu.as_ref().unwrap();
    mu.log_density(&rec.start[..1]).unwrap() - mu.log_density(&rec.end[..1]).unwrap() + rec.end[1]
}

// ---------------------------------------------------------------------------

#[test]
fn criterion_01_cell_solver_accuracy() {
    let t0 = Instant::now();
    let model = catalog::ou(1.0);
    let norm = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    let mut errs = Vec::new();
    let mut phi_errs = Vec::new();
    for nodes in [257usize, 513] {
        let grid = model.fast_grid(nodes);
        let sol = build_cell(&model.coeffs, None, &[0.0], 0.0, &grid, None, None).unwrap();
        sol.check_invariants().unwrap();
        let mut rho_err = 0.0f64;
        let mut phi_err = 0.0f64;
        for idx in 0..grid.len() {
            let y = grid.node(idx)[0];
            rho_err = rho_err.max((sol.rho[idx] - norm * (-0.5 * y * y).exp()).abs());
            // phi solves -L0 phi = y with solution phi = y (gamma = 1).
            phi_err = phi_err.max((sol.phi[0][idx] - y).abs());
        }
        errs.push(rho_err);
        phi_errs.push(phi_err);
    }
    let secs = t0.elapsed().as_secs_f64();
    let ratio = errs[0] / errs[1];
    let pass = errs[0] <= 1e-4
        && phi_errs[0] <= 1e-4
        && (3.0..5.5).contains(&ratio)
        && secs < 5.0;
    verdict(
        1,
        "cell solver",
        pass,
        &format!(
            "257-node sup errors rho {:.2e}, phi {:.2e} (gate 1e-4); halving ratio {ratio:.2} \
             (gate 3..5.5); {secs:.2}s (gate 5s)",
            errs[0], phi_errs[0]
        ),
    );
}

#[test]
fn criterion_02_averaged_coefficients() {
    // Hand values: ou(1) has w = -x, A = 1 + 2/gamma = 3; the kinetic model
    // has w = -x/gamma and the Kramers-Smoluchowski diffusion A = 2/gamma.
    let probes = [-1.3, 0.0, 0.7];
    let mut worst_analytic = 0.0f64;
    let mut worst_fd = 0.0f64;
    let cases: [(MultiscaleModel, fn(f64) -> f64, f64); 2] = [
        (catalog::ou(1.0), |x| -x, 3.0),
        (catalog::underdamped(0.5), |x| -2.0 * x, 4.0),
    ];
    for (model, w_of, a_exact) in cases {
        let exact_bank = analytic_bank(&model, None);
        let fd_bank = CellBank::new(model.coeffs.clone(), None, model.fast_grid(513), None);
        for &x in &probes {
            let p = averaged_at(&exact_bank, None, &[x], 0.0).unwrap();
            worst_analytic = worst_analytic
                .max((p.w[0] - w_of(x)).abs())
                .max((p.a[(0, 0)] - a_exact).abs());
            let q = averaged_at(&fd_bank, None, &[x], 0.0).unwrap();
            worst_fd = worst_fd
                .max((q.w[0] - w_of(x)).abs())
                .max((q.a[(0, 0)] - a_exact).abs());
        }
    }
    let pass = worst_analytic <= 1e-6 && worst_fd <= 1e-3;
    verdict(
        2,
        "averaging",
        pass,
        &format!(
            "worst deviation analytic {worst_analytic:.2e} (gate 1e-6), \
             fd/513-node {worst_fd:.2e} (gate 1e-3)"
        ),
    );
}

#[test]
fn criterion_03_identity_residuals() {
    let model = catalog::ou(1.0);
    let bank = analytic_bank(&model, None);
    let cmp = slow_shift_comparable(&model, 0.0, 1.0);
    let grid = XtGrid::line(-3.0, 3.0, 13, vec![0.0]);
    let avg = AveragedModel::build(&bank, Some(&cmp), grid.clone()).unwrap();
    let ext = ExtendedSystem::build_forward(&bank, &cmp, grid.clone()).unwrap();
    // Structural identities of the extended forward system, checked directly
    // from the tabulated coefficients: diag = 2 * drift, cross row = w - w_hat.
    let mut ident = ext.max_identity_residual;
    for &x in &[-1.0, 0.3, 2.0] {
        let u = avg.w_at(x).unwrap() - avg.w2_at(x).unwrap();
        ident = ident
            .max((ext.bar_a_m1m1_at(x).unwrap() - 2.0 * ext.bar_w_m1_at(x).unwrap()).abs())
            .max((ext.bar_a_m1x_at(x).unwrap() - u).abs());
    }

    let ep = make_entropy_production_spec(&model.coeffs, &ParityVector::slow_even_fast_odd(1, 1));
    let bank_b = analytic_bank(&model, ep.f2.clone());
    let avg_b = AveragedModel::build(&bank_b, Some(&ep), grid.clone()).unwrap();
    let ext_b = ExtendedSystem::build_backward(&bank_b, &ep, grid).unwrap();
    let bwd_ident = ext_b.max_identity_residual;
    let a_match = avg_b.prop38_residual.unwrap_or(f64::INFINITY);

    let pass = ident <= 1e-6 && bwd_ident <= 1e-6 && a_match <= 1e-6;
    verdict(
        3,
        "identity residuals",
        pass,
        &format!(
            "forward {ident:.2e}, backward {bwd_ident:.2e}, A-matching {a_match:.2e} (gates 1e-6)"
        ),
    );
}

#[test]
fn criterion_04_forward_fluctuation_battery() {
    let t0 = Instant::now();
    let mut model = catalog::ou(1.0);
    model.epsilon = 0.1;
    model.burn_in = 0.0; // the fluctuation identity is exact for any initial law
    let cmp = slow_shift_comparable(&model, 1.0, 0.0);
    let func = forward_epsilon_integrands(&model.coeffs, &cmp).unwrap();

    // eps-free check: the reduced integrand must agree with the explicitly
    // eps-scaled assembly at two different eps.
    let mut eps_dev = 0.0f64;
    for eps in [0.1, 0.037] {
        let mut m2 = model.clone();
        m2.epsilon = eps;
        for (x, y) in [(0.3, -0.8), (-1.1, 0.4)] {
            let (dt_u, row_u) = forward_unreduced_at(&m2, &cmp, &[x], &[y], 0.0).unwrap();
            let mut row = [0.0; 2];
            let dt_r = (func.eval)(&[x], &[y], 0.0, &mut row);
            eps_dev = eps_dev.max((dt_u - dt_r).abs());
            for k in 0..2 {
                eps_dev = eps_dev.max((row_u[k] - row[k]).abs());
            }
        }
    }
    assert!(eps_dev <= 1e-8, "reduced integrand not eps-free: {eps_dev:.2e}");

    // eps-level runs at the pinned resolution dt = 1e-3 eps^2.
    let dt = 1e-3 * model.epsilon * model.epsilon;
    let mut checks = Vec::new();
    let fixed = simulate_multiscale(
        &model,
        std::slice::from_ref(&func),
        &SimOptions::fixed(10_000, dt, 41, 1.0),
    )
    .unwrap();
    let fv: Vec<f64> = fixed.records.iter().map(|r| r.values[0]).collect();
    checks.push(ift_check("F_eps/fixed", &fv));
    let exit = simulate_multiscale(
        &model,
        std::slice::from_ref(&func),
        &SimOptions {
            n_paths: 10_000,
            dt,
            seed: 42,
            rule: StoppingRule::FirstExit {
                x_lo: -1.5,
                x_hi: 1.5,
                cap: 1.0,
            },
            checkpoints: vec![0.25, 0.5, 0.75, 1.0],
        },
    )
    .unwrap();
    let ev: Vec<f64> = exit.records.iter().map(|r| r.values[0]).collect();
    checks.push(ift_check("F_eps/first-exit", &ev));

    // Limit battery: [X, F, F1, F2] under both stopping rules.
    let bank = analytic_bank(&model, None);
    let (_, sys) = forward_limit_system(&bank, &cmp, -6.0, 6.0);
    let mut additivity = 0.0f64;
    for rule in [
        StoppingRule::FixedTime(1.0),
        StoppingRule::FirstExit {
            x_lo: -1.5,
            x_hi: 1.5,
            cap: 1.0,
        },
    ] {
        let recs = simulate_limit(
            &sys,
            &LimitOptions {
                n_paths: 10_000,
                dt: 1e-3,
                seed: 43,
                rule,
                init: InitialLaw::DiagonalGaussian {
                    mean: vec![0.0],
                    std: vec![1.0],
                },
                slow_dim: 1,
                checkpoints: vec![0.25, 0.5, 0.75, 1.0],
            },
        )
        .unwrap();
        let tag = match rule {
            StoppingRule::FixedTime(_) => "fixed",
            _ => "first-exit",
        };
        for (coord, label) in [(1usize, "F"), (2, "F1"), (3, "F2")] {
            let vals: Vec<f64> = recs.iter().map(|r| r.end[coord]).collect();
            checks.push(ift_check(&format!("{label}/{tag}"), &vals));
        }
        for r in &recs {
            additivity = additivity.max((r.end[2] + r.end[3] - r.end[1]).abs());
        }
    }
    assert!(additivity <= 1e-12, "F != F1 + F2 per path: {additivity:.2e}");

    let secs = t0.elapsed().as_secs_f64();
    for c in &checks {
        println!("    {}", c.line());
    }
    let pass = checks.iter().all(|c| c.pass) && secs < 300.0;
    let worst = checks
        .iter()
        .map(|c| c.metrics["deviation"] / c.metrics["se"])
        .fold(0.0f64, f64::max);
    verdict(
        4,
        "forward fluctuation theorems",
        pass,
        &format!(
            "8 estimates of E[e^-F] within 3 SE (worst dev {worst:.2} SE), \
             additivity {additivity:.1e}, eps-free dev {eps_dev:.1e}; {secs:.0}s (gate 300s)"
        ),
    );
}

#[test]
fn criterion_05_noise_splitting_orthogonality() {
    // Realized covariation of e^{-F1} and e^{-F2} on the forward limit run.
    let model = catalog::ou(1.0);
    let cmp = slow_shift_comparable(&model, 1.0, 0.0);
    let bank = analytic_bank(&model, None);
    let (_, sys) = forward_limit_system(&bank, &cmp, -6.0, 6.0);
    let recs = simulate_limit(
        &sys,
        &LimitOptions {
            n_paths: 10_000,
            dt: 1e-3,
            seed: 43,
            rule: StoppingRule::FixedTime(1.0),
            init: InitialLaw::DiagonalGaussian {
                mean: vec![0.0],
                std: vec![1.0],
            },
            slow_dim: 1,
            checkpoints: vec![0.25, 0.5, 0.75, 1.0],
        },
    )
    .unwrap();
    let check = exp_covariation_zero_check("cov(e^-F1, e^-F2)", &recs, 4, 2, 3);
    verdict(5, "orthogonality", check.pass, &check.detail);
}

#[test]
fn criterion_06_backward_fluctuation_battery() {
    let mut model = catalog::ou(1.0);
    model.epsilon = 0.1;
    model.burn_in = 0.0;
    model.horizon = 0.25; // short horizon keeps e^{-G} well out of the heavy-tail regime
    let ep = make_entropy_production_spec(&model.coeffs, &ParityVector::slow_even_fast_odd(1, 1));

    let mut checks = Vec::new();

    // eps level: G^eps = I^eps + H^eps with the exact joint Gaussian boundary.
    // 4e4 paths are needed to bring the SE of the exponential estimator under
    // the 0.05 gate (var(G^eps) ~ 6T on this benchmark).
    let dens = Arc::new(joint_density_path(&model, model.horizon).unwrap());
    let acc = backward_epsilon_accumulator(&model, &ep, dens).unwrap();
    let funcs = [acc.i_term, acc.h_term];
    let out = simulate_multiscale(
        &model,
        &funcs,
        &SimOptions::fixed(40_000, 1e-3, 51, model.horizon),
    )
    .unwrap();
    let gv: Vec<f64> = out.records.iter().map(|r| r.values[0] + r.values[1]).collect();
    checks.push(ift_check("G_eps/fixed", &gv));

    // Limit: [X, H, G1int] started away from stationarity (N(0,1) against the
    // stationary variance A/2 = 1.5) so that G1 is a nontrivial functional.
    // The averaged marginal p(x,t) stays Gaussian with mean 0 and variance
    // v(t) = 3/2 - 1/2 e^{-2t} (dX = -X dt + sqrt(3) dB).
    let logp = |x: f64, t: f64| {
        let v = 1.5 - 0.5 * (-2.0 * t).exp();
        -0.5 * x * x / v - 0.5 * v.ln()
    };
    let bank = analytic_bank(&model, ep.f2.clone());
    let (_avg, sys) = backward_limit_system(&bank, &ep, -6.0, 6.0);
    let init = InitialLaw::DiagonalGaussian {
        mean: vec![0.0],
        std: vec![1.0],
    };
    let fixed = simulate_limit(
        &sys,
        &LimitOptions {
            n_paths: 10_000,
            dt: 1e-3,
            seed: 52,
            rule: StoppingRule::FixedTime(0.25),
            init: init.clone(),
            slow_dim: 1,
            checkpoints: vec![0.25],
        },
    )
    .unwrap();
    let g1: Vec<f64> = fixed
        .iter()
        .map(|r| logp(r.start[0], 0.0) - logp(r.end[0], r.stop_time) + r.end[2])
        .collect();
    checks.push(ift_check("G1/fixed", &g1));

    // G2 = G - G1 = H - G1int is boundary free, so it is well defined at a
    // first-exit time without evaluating any density there.
    let exit = simulate_limit(
        &sys,
        &LimitOptions {
            n_paths: 10_000,
            dt: 1e-3,
            seed: 53,
            rule: StoppingRule::FirstExit {
                x_lo: -1.2,
                x_hi: 1.2,
                cap: 1.0,
            },
            init,
            slow_dim: 1,
            checkpoints: vec![0.25, 0.5, 0.75, 1.0],
        },
    )
    .unwrap();
    let g2: Vec<f64> = exit.iter().map(|r| r.end[1] - r.end[2]).collect();
    checks.push(ift_check("G2/first-exit", &g2));

    // Martingale increments of e^{-G2} across checkpoints, regressed on
    // {1, X, X^2}; every coefficient within 3 SE of zero.
    let g2_at = |r: &LimitRecord, k: usize| -> f64 {
        let s = &r.checkpoint_states[k];
        s[1] - s[2]
    };
    let mut worst_t = 0.0f64;
    for k in 0..3 {
        let mut y = Vec::with_capacity(exit.len());
        let mut design = Vec::with_capacity(3 * exit.len());
        for r in &exit {
            y.push((-g2_at(r, k + 1)).exp() - (-g2_at(r, k)).exp());
            let x = r.checkpoint_states[k][0];
            design.extend_from_slice(&[1.0, x, x * x]);
        }
        let fit = ols(&y, &design, 3).unwrap();
        for i in 0..3 {
            worst_t = worst_t.max((fit.coef[i] / fit.coef_se[i]).abs());
        }
    }

    for c in &checks {
        println!("    {}", c.line());
    }
    let pass = checks.iter().all(|c| c.pass) && worst_t <= 3.0;
    verdict(
        6,
        "backward fluctuation theorems",
        pass,
        &format!(
            "G_eps, G1 fixed-time and G2 first-exit within 3 SE; martingale \
             regression worst |t| = {worst_t:.2} (gate 3)"
        ),
    );
}

#[test]
fn criterion_07_weak_convergence() {
    // Strongly coupled benchmark (gamma = 0.1) so finite-eps corrections are
    // well above the KS noise floor at 1e4 paths.
    let base = catalog::ou(0.1);
    let cmp = slow_shift_comparable(&base, 0.0, 1.0);
    let func = forward_epsilon_integrands(&base.coeffs, &cmp).unwrap();
    let ep = make_entropy_production_spec(&base.coeffs, &ParityVector::slow_even_fast_odd(1, 1));

    let bank = analytic_bank(&base, None);
    let (avg_f, sys_f) = forward_limit_system(&bank, &cmp, -14.0, 14.0);
    let bank_b = analytic_bank(&base, ep.f2.clone());
    let (avg_b, sys_b) = backward_limit_system(&bank_b, &ep, -14.0, 14.0);
    let init = InitialLaw::DiagonalGaussian {
        mean: vec![0.0],
        std: vec![(avg_f.a_at(0.0).unwrap() / 2.0).sqrt()],
    };
    let lopts = |seed| LimitOptions {
        n_paths: 10_000,
        dt: 1e-3,
        seed,
        rule: StoppingRule::FixedTime(1.0),
        init: init.clone(),
        slow_dim: 1,
        checkpoints: vec![1.0],
    };
    let lim_f = simulate_limit(&sys_f, &lopts(61)).unwrap();
    let lim_x: Vec<f64> = lim_f.iter().map(|r| r.end[0]).collect();
    let lim_fv: Vec<f64> = lim_f.iter().map(|r| r.end[1]).collect();
    let lim_b = simulate_limit(&sys_b, &lopts(62)).unwrap();
    let lim_g: Vec<f64> = lim_b.iter().map(|r| limit_g(&avg_b, r)).collect();

    let mut dxs = Vec::new();
    let mut dfs = Vec::new();
    let mut dgs = Vec::new();
    for eps in [0.5, 0.2, 0.1] {
        let mut m = base.clone();
        m.epsilon = eps;
        m.burn_in = 3.0; // relax to the eps-level stationary law before t = 0
        m.x_lo = vec![-16.0];
        m.x_hi = vec![16.0];
        let opts = SimOptions::fixed(10_000, 1e-3, 63, 1.0);
        let out = simulate_multiscale(&m, std::slice::from_ref(&func), &opts).unwrap();
        let xs: Vec<f64> = out.records.iter().map(|r| r.end[0]).collect();
        let fs: Vec<f64> = out.records.iter().map(|r| r.values[0]).collect();
        dxs.push(ks_two_sample(&xs, &lim_x).0);
        dfs.push(ks_two_sample(&fs, &lim_fv).0);
        let dens = Arc::new(joint_density_path(&m, 1.0).unwrap());
        let acc = backward_epsilon_accumulator(&m, &ep, dens).unwrap();
        let outg = simulate_multiscale(&m, &[acc.i_term, acc.h_term], &opts).unwrap();
        let gs: Vec<f64> = outg.records.iter().map(|r| r.values[0] + r.values[1]).collect();
        dgs.push(ks_two_sample(&gs, &lim_g).0);
    }
    let monotone = |d: &[f64]| d[0] > d[1] && d[1] > d[2];
    let pass = monotone(&dxs) && monotone(&dfs) && monotone(&dgs);
    verdict(
        7,
        "weak convergence",
        pass,
        &format!(
            "KS over eps = 0.5, 0.2, 0.1: X {:.3}>{:.3}>{:.3}, F {:.3}>{:.3}>{:.3}, \
             G {:.3}>{:.3}>{:.3} (gate: strictly decreasing)",
            dxs[0], dxs[1], dxs[2], dfs[0], dfs[1], dfs[2], dgs[0], dgs[1], dgs[2]
        ),
    );
}

#[test]
fn criterion_08_physical_specializations() {
    // (i) Velocity-reversal parity and compatibility on the kinetic model.
    let um = catalog::underdamped(1.0);
    let parity = ParityVector::slow_even_fast_odd(1, 1);
    let ep = make_entropy_production_spec(&um.coeffs, &parity);
    let cell = build_cell(
        &um.coeffs,
        um.analytic_cell.as_ref(),
        &[0.0],
        0.0,
        &um.fast_grid(257),
        None,
        None,
    )
    .unwrap();
    let report = check_compatible_conditions(&um.coeffs, ep.f2.as_ref().unwrap(), &cell, Some(&parity))
        .unwrap();
    let compat = report
        .a41_residual
        .max(report.a42_residual)
        .max(report.parity_residuals.map(|p| p.max()).unwrap_or(0.0));
    assert!(compat <= 1e-9, "compatibility residual {compat:.2e}");

    // Parity-built comparable equals the hand-written reversed drifts.
    let mut spec_dev = 0.0f64;
    for (x, y) in [(0.4, -0.9), (-1.2, 0.3)] {
        let b2 = ep.b2.eval(&[x], &[y], 0.0);
        let g2 = ep.g2.eval(&[x], &[y], 0.0);
        let f2 = ep.f2.as_ref().unwrap().eval(&[x], &[y], 0.0);
        spec_dev = spec_dev
            .max((b2[0] - 0.0).abs())
            .max((g2[0] - x).abs())
            .max((f2[0] + y).abs());
    }
    assert!(spec_dev <= 1e-12, "parity comparable deviates: {spec_dev:.2e}");

    // (ii) Entropy production on a reversible stationary benchmark (slow and
    // fast OU, uncoupled) concentrates at zero and its variance shrinks under
    // dt refinement.  The continuum functional is identically zero pathwise,
    // so everything measured here is residual discretization noise.
    let mut model = catalog::ou_reversible();
    model.epsilon = 0.1;
    model.burn_in = 0.0;
    let ep_rev = make_entropy_production_spec(&model.coeffs, &parity);
    let mut stats = Vec::new();
    for dt in [1e-3, 2.5e-4] {
        let dens = Arc::new(joint_density_path(&model, 1.0).unwrap());
        let acc = backward_epsilon_accumulator(&model, &ep_rev, dens).unwrap();
        let out = simulate_multiscale(
            &model,
            &[acc.i_term, acc.h_term],
            &SimOptions::fixed(2_000, dt, 71, 1.0),
        )
        .unwrap();
        let g: Vec<f64> = out.records.iter().map(|r| r.values[0] + r.values[1]).collect();
        stats.push(summarize(&g));
    }
    let concentrated = stats[1].mean.abs() <= 3.0 * stats[1].se;
    let var_shrinks = stats[1].std * stats[1].std < 0.5 * stats[0].std * stats[0].std;

    // (iii) Second-law inequality: total entropy production on the ou EP
    // benchmark and housekeeping entropy on the rotation benchmark.
    let mut ou = catalog::ou(1.0);
    ou.epsilon = 0.1;
    ou.burn_in = 0.0;
    let ep_ou = make_entropy_production_spec(&ou.coeffs, &parity);
    let dens = Arc::new(joint_density_path(&ou, 1.0).unwrap());
    let acc = backward_epsilon_accumulator(&ou, &ep_ou, dens).unwrap();
    let out = simulate_multiscale(
        &ou,
        &[acc.i_term, acc.h_term],
        &SimOptions::fixed(2_000, 1e-3, 72, 1.0),
    )
    .unwrap();
    let s_tot: Vec<f64> = out.records.iter().map(|r| r.values[0] + r.values[1]).collect();
    let st = summarize(&s_tot);

    let mut rot = catalog::rotation(0.5);
    rot.epsilon = 0.1;
    rot.burn_in = 0.0;
    let hk = build_comparable(
        &rot,
        &ComparableConfig {
            kind: "housekeeping".into(),
            parity: Some("even".into()),
            ..Default::default()
        },
    )
    .unwrap();
    let hk_func = forward_epsilon_integrands(&rot.coeffs, &hk).unwrap();
    let out = simulate_multiscale(
        &rot,
        std::slice::from_ref(&hk_func),
        &SimOptions::fixed(2_000, 1e-3, 73, 1.0),
    )
    .unwrap();
    let s_hk: Vec<f64> = out.records.iter().map(|r| r.values[0]).collect();
    let sh = summarize(&s_hk);
    // Positive rate 2 theta^2 E|X|^2 = 0.5 per unit time at theta = 0.5.
    let second_law = st.mean >= -3.0 * st.se && sh.mean >= -3.0 * sh.se;

    let pass = concentrated && var_shrinks && second_law;
    verdict(
        8,
        "physical specializations",
        pass,
        &format!(
            "compat residual {compat:.1e}; reversible-stationary EP mean {:.1e} +- {:.1e} with var \
             {:.2e} -> {:.2e} under dt/4; S_tot {:.3} +- {:.3}, S_hk {:.3} +- {:.3} (gates >= -3 SE)",
            stats[1].mean,
            stats[1].se,
            stats[0].std * stats[0].std,
            stats[1].std * stats[1].std,
            st.mean,
            st.se,
            sh.mean,
            sh.se
        ),
    );
}

#[test]
fn criterion_09_anomalous_part_nonvanishing() {
    let um = catalog::underdamped(1.0);
    // Forward comparable differing only through fast fluctuations:
    // g_hat = g + (y^2 - 1), which has zero rho-average, so F carries no
    // regular (reduced-Girsanov) part at all and F2 is pure anomaly.
    let gbase = um.coeffs.g.clone();
    let cmp = ComparableSpec {
        name: "fast-fluctuation-tilt".into(),
        side: Side::Forward,
        b2: um.coeffs.b.clone(),
        g2: VecField::new(1, move |x, y, t, out| {
            gbase.eval_into(x, y, t, out);
            out[0] += y[0] * y[0] - 1.0;
        }),
        f2: None,
        parity: None,
    };
    let bank = analytic_bank(&um, None);
    let (_, sys_f) = forward_limit_system(&bank, &cmp, -6.0, 6.0);
    let init = InitialLaw::DiagonalGaussian {
        mean: vec![0.0],
        std: vec![1.0],
    };
    let recs = simulate_limit(
        &sys_f,
        &LimitOptions {
            n_paths: 4_000,
            dt: 1e-3,
            seed: 81,
            rule: StoppingRule::FixedTime(1.0),
            init: init.clone(),
            slow_dim: 1,
            checkpoints: vec![1.0],
        },
    )
    .unwrap();
    let f2: Vec<f64> = recs.iter().map(|r| r.end[3]).collect();
    let (var_f2, se_f2) = variance_with_se(&f2);

    // Backward: entropy production of the kinetic model with slow noise
    // (ou with f = y).  Its regular part vanishes identically -- vg/A exactly
    // cancels the score of the stationary density -- so the entire entropy
    // production is anomalous: G2 = H - G1int carries genuine noise
    // (|n2|^2 = 8x^2/3) that no Girsanov reduction of the averaged process
    // can produce.
    let ou = catalog::ou(1.0);
    let ep = make_entropy_production_spec(&ou.coeffs, &ParityVector::slow_even_fast_odd(1, 1));
    let bank_b = analytic_bank(&ou, ep.f2.clone());
    let (avg_b, sys_b) = backward_limit_system(&bank_b, &ep, -6.0, 6.0);
    let recs_b = simulate_limit(
        &sys_b,
        &LimitOptions {
            n_paths: 4_000,
            dt: 1e-3,
            seed: 82,
            rule: StoppingRule::FixedTime(1.0),
            init: InitialLaw::DiagonalGaussian {
                mean: vec![0.0],
                std: vec![(avg_b.a_at(0.0).unwrap() / 2.0).sqrt()],
            },
            slow_dim: 1,
            checkpoints: vec![1.0],
        },
    )
    .unwrap();
    let g2: Vec<f64> = recs_b.iter().map(|r| r.end[1] - r.end[2]).collect();
    let (var_g2, se_g2) = variance_with_se(&g2);

    let pass = var_f2 > 10.0 * se_f2 && var_g2 > 10.0 * se_g2;
    verdict(
        9,
        "anomalous part nonvanishing",
        pass,
        &format!(
            "var(F2_T) = {var_f2:.3} ({:.0} SE), var(G2_T) = {var_g2:.3} ({:.0} SE); gate 10 SE",
            var_f2 / se_f2,
            var_g2 / se_g2
        ),
    );
}

#[test]
fn criterion_10_mutation_sensitivity() {
    // Flipping the sign of the dt integrand must break the fluctuation
    // identity detectably (guards against a vacuous criterion 4).
    let mut model = catalog::ou(1.0);
    model.epsilon = 0.1;
    model.burn_in = 0.0;
    let cmp = slow_shift_comparable(&model, 1.0, 0.0);
    let broken = forward_epsilon_integrands(&model.coeffs, &cmp)
        .unwrap()
        .with_drift_sign_flipped();
    let out = simulate_multiscale(
        &model,
        &[broken],
        &SimOptions::fixed(2_000, 1e-3, 91, 1.0),
    )
    .unwrap();
    let v: Vec<f64> = out.records.iter().map(|r| r.values[0]).collect();
    let check = ift_check("F_eps/dt-flipped", &v);
    verdict(
        10,
        "mutation sensitivity",
        !check.pass,
        &format!("sign-flipped dt integrand rejected: {}", check.detail),
    );
}

#[test]
fn backward_direct_form_agrees_under_dt_refinement() {
    // The direct (unreduced) G^eps accumulator carries O(1/eps^2) integrands,
    // so its per-path agreement with I + H converges only at the strong
    // Euler-Maruyama rate; check the gap shrinks with dt as expected.
    let mut model = catalog::ou(1.0);
    model.epsilon = 0.1;
    model.burn_in = 0.0;
    model.horizon = 0.25;
    let ep = make_entropy_production_spec(&model.coeffs, &ParityVector::slow_even_fast_odd(1, 1));
    let mut gaps = Vec::new();
    for dt in [1e-3, 1e-4, 1e-5] {
        let dens = Arc::new(joint_density_path(&model, model.horizon).unwrap());
        let acc = backward_epsilon_accumulator(&model, &ep, dens).unwrap();
        let funcs = [acc.direct, acc.i_term, acc.h_term];
        let out = simulate_multiscale(
            &model,
            &funcs,
            &SimOptions::fixed(100, dt, 95, model.horizon),
        )
        .unwrap();
        let mean_gap = out
            .records
            .iter()
            .map(|r| (r.values[0] - r.values[1] - r.values[2]).abs())
            .sum::<f64>()
            / out.records.len() as f64;
        gaps.push(mean_gap);
    }
    println!(
        "    direct-vs-split mean |gap| at dt = 1e-3, 1e-4, 1e-5: {:.3e}, {:.3e}, {:.3e}",
        gaps[0], gaps[1], gaps[2]
    );
    assert!(
        gaps[0] > gaps[1] && gaps[1] > gaps[2],
        "per-path gap does not shrink with dt: {gaps:?}"
    );
    // Strong order 1/2 predicts a ~sqrt(10) reduction per decade.
    assert!(
        gaps[2] < 0.5 * gaps[0],
        "gap reduction weaker than expected: {gaps:?}"
    );
}

#[test]
fn unused_noise_checkpoint_smoke() {
    // Placeholder keeping one non-criterion structural invariant visible in
    // the acceptance output: limit QV bookkeeping matches its prediction.
    let model = catalog::ou(1.0);
    let cmp = slow_shift_comparable(&model, 1.0, 0.0);
    let bank = analytic_bank(&model, None);
    let (_, sys) = forward_limit_system(&bank, &cmp, -6.0, 6.0);
    let recs = simulate_limit(
        &sys,
        &LimitOptions {
            n_paths: 500,
            dt: 1e-3,
            seed: 97,
            rule: StoppingRule::FixedTime(1.0),
            init: InitialLaw::DiagonalGaussian {
                mean: vec![0.0],
                std: vec![1.0],
            },
            slow_dim: 1,
            checkpoints: vec![1.0],
        },
    )
    .unwrap();
    let emp: f64 = recs.iter().map(|r| r.covar_exp_emp[1 * 4 + 1]).sum();
    let pred: f64 = recs.iter().map(|r| r.qv_exp_pred[1]).sum();
    assert!(
        (emp / pred - 1.0).abs() < 0.1,
        "QV(e^-F) ratio {}",
        emp / pred
    );
}
