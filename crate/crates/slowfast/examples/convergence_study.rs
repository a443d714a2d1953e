//! Weak convergence of the slow variable and of the forward/backward
//! functionals as eps -> 0, measured by two-sample Kolmogorov-Smirnov
//! distance against samples from the limit systems.
//!
//! Uses the strongly coupled OU model (gamma = 0.1), where the stationary
//! slow variance moves from ~1.8 at eps = 0.5 to ~10.5 in the limit, so the
//! finite-eps corrections sit far above the KS noise floor.
//!
//!   cargo run --release --example convergence_study

use slowfast::averaging::{AveragedModel, CellBank, ExtendedSystem, XtGrid};
use slowfast::catalog;
use slowfast::field::VecField;
use slowfast::functionals::{
    backward_epsilon_accumulator, forward_epsilon_integrands, joint_density_path,
    limit_backward_decomposition, limit_forward_decomposition, make_entropy_production_spec,
};
use slowfast::model::{ComparableSpec, InitialLaw, ParityVector, Side};
use slowfast::path::{simulate_limit, simulate_multiscale, LimitOptions, SimOptions, StoppingRule};
use slowfast::stats::ks_two_sample;
use std::sync::Arc;

const N: usize = 2_000;

fn main() {
    let base = catalog::ou(0.1);
    let bb = base.coeffs.b.clone();
    let cmp = ComparableSpec {
        name: "xshift".into(),
        side: Side::Forward,
        b2: VecField::new(1, move |x, y, t, out| {
            bb.eval_into(x, y, t, out);
            out[0] += x[0];
        }),
        g2: base.coeffs.g.clone(),
        f2: None,
        parity: None,
    };
    let func = forward_epsilon_integrands(&base.coeffs, &cmp).unwrap();
    let ep = make_entropy_production_spec(&base.coeffs, &ParityVector::slow_even_fast_odd(1, 1));

    // Limit samples.
    let bank = CellBank::new(
        base.coeffs.clone(),
        base.analytic_cell.clone(),
        base.fast_grid(257),
        None,
    );
    let bank_b = CellBank::new(
        base.coeffs.clone(),
        base.analytic_cell.clone(),
        base.fast_grid(257),
        ep.f2.clone(),
    );
    let grid = XtGrid::line(-14.0, 14.0, 33, vec![0.0]);
    let avg = Arc::new(AveragedModel::build(&bank, Some(&cmp), grid.clone()).unwrap());
    let ext = Arc::new(ExtendedSystem::build_forward(&bank, &cmp, grid.clone()).unwrap());
    let sys_f = limit_forward_decomposition(avg.clone(), ext).unwrap();
    let mut avg_b = AveragedModel::build(&bank_b, Some(&ep), grid.clone()).unwrap();
    avg_b.solve_mu().unwrap();
    let avg_b = Arc::new(avg_b);
    let ext_b = Arc::new(ExtendedSystem::build_backward(&bank_b, &ep, grid).unwrap());
    let sys_b = limit_backward_decomposition(avg_b.clone(), ext_b).unwrap();

    let init = InitialLaw::DiagonalGaussian {
        mean: vec![0.0],
        std: vec![(avg.a_at(0.0).unwrap() / 2.0).sqrt()],
    };
    let lopts = |seed| LimitOptions {
        n_paths: N,
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
    let mu = avg_b.mu.as_ref().unwrap();
    let lim_b = simulate_limit(&sys_b, &lopts(62)).unwrap();
    let lim_g: Vec<f64> = lim_b
        .iter()
        .map(|r| {
            mu.log_density(&r.start[..1]).unwrap() - mu.log_density(&r.end[..1]).unwrap()
                + r.end[1]
        })
        .collect();

    println!("{:>6} {:>9} {:>9} {:>9}", "eps", "KS(X)", "KS(F)", "KS(G)");
    for eps in [0.5, 0.2, 0.1] {
        let mut m = base.clone();
        m.epsilon = eps;
        m.burn_in = 3.0; // relax to the eps-level stationary law before t = 0
        m.x_lo = vec![-16.0];
        m.x_hi = vec![16.0];
        let opts = SimOptions::fixed(N, 1e-3, 63, 1.0);
        let out = simulate_multiscale(&m, std::slice::from_ref(&func), &opts).unwrap();
        let xs: Vec<f64> = out.records.iter().map(|r| r.end[0]).collect();
        let fs: Vec<f64> = out.records.iter().map(|r| r.values[0]).collect();
        let dens = Arc::new(joint_density_path(&m, 1.0).unwrap());
        let acc = backward_epsilon_accumulator(&m, &ep, dens).unwrap();
        let outg = simulate_multiscale(&m, &[acc.i_term, acc.h_term], &opts).unwrap();
        let gs: Vec<f64> = outg
            .records
            .iter()
            .map(|r| r.values[0] + r.values[1])
            .collect();
        println!(
            "{eps:>6} {:>9.4} {:>9.4} {:>9.4}",
            ks_two_sample(&xs, &lim_x).0,
            ks_two_sample(&fs, &lim_fv).0,
            ks_two_sample(&gs, &lim_g).0
        );
    }
}
