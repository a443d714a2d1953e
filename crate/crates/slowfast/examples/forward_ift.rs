//! Forward fluctuation theorem, end to end: accumulate F^eps along paths of
//! the two-scale system, then simulate the limit triple (F, F1, F2) from the
//! extended averaged system, and check E[e^-F] = 1 for all four.
//!
//! The comparable process shifts the slow drift by +1, which on the coupled
//! OU benchmark gives F^eps = -W_1(T) + T/2 exactly (any eps).
//!
//!   cargo run --release --example forward_ift

use slowfast::averaging::{AveragedModel, CellBank, ExtendedSystem, XtGrid};
use slowfast::catalog;
use slowfast::field::VecField;
use slowfast::functionals::{forward_epsilon_integrands, limit_forward_decomposition};
use slowfast::harness::ift_check;
use slowfast::model::{ComparableSpec, InitialLaw, Side};
use slowfast::path::{simulate_limit, simulate_multiscale, LimitOptions, SimOptions, StoppingRule};
use std::sync::Arc;

fn main() {
    let mut model = catalog::ou(1.0);
    model.epsilon = 0.1;
    model.burn_in = 0.0;

    let base = model.coeffs.b.clone();
    let cmp = ComparableSpec {
        name: "shift".into(),
        side: Side::Forward,
        b2: VecField::new(1, move |x, y, t, out| {
            base.eval_into(x, y, t, out);
            out[0] += 1.0;
        }),
        g2: model.coeffs.g.clone(),
        f2: None,
        parity: None,
    };

    // eps level: the reduced integrand needs no eps at all.
    let func = forward_epsilon_integrands(&model.coeffs, &cmp).unwrap();
    let dt = 1e-3 * model.epsilon * model.epsilon;
    let out = simulate_multiscale(
        &model,
        std::slice::from_ref(&func),
        &SimOptions::fixed(10_000, dt, 1, 1.0),
    )
    .unwrap();
    let f: Vec<f64> = out.records.iter().map(|r| r.values[0]).collect();
    println!("{}", ift_check("F_eps (eps = 0.1)", &f).line());

    // Limit: [X, F, F1, F2] from the extended averaged system.
    let bank = CellBank::new(
        model.coeffs.clone(),
        model.analytic_cell.clone(),
        model.fast_grid(257),
        None,
    );
    let grid = XtGrid::line(-6.0, 6.0, 33, vec![0.0]);
    let avg = Arc::new(AveragedModel::build(&bank, Some(&cmp), grid.clone()).unwrap());
    let ext = Arc::new(ExtendedSystem::build_forward(&bank, &cmp, grid).unwrap());
    println!(
        "extended-system identity residual: {:.2e}",
        ext.max_identity_residual
    );
    let sys = limit_forward_decomposition(avg, ext).unwrap();
    let recs = simulate_limit(
        &sys,
        &LimitOptions {
            n_paths: 10_000,
            dt: 1e-3,
            seed: 2,
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
    for (coord, label) in [(1usize, "F"), (2, "F1"), (3, "F2")] {
        let vals: Vec<f64> = recs.iter().map(|r| r.end[coord]).collect();
        println!("{}", ift_check(&format!("{label} (limit)"), &vals).line());
    }

    // F = F1 + F2 holds per path by construction.
    let worst = recs
        .iter()
        .map(|r| (r.end[2] + r.end[3] - r.end[1]).abs())
        .fold(0.0f64, f64::max);
    println!("max per-path |F1 + F2 - F| = {worst:.2e}");
}
