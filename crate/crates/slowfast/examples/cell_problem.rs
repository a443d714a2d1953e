//! Solve the fast-scale cell problem on the coupled OU benchmark and compare
//! the finite-difference backend against the closed forms
//! rho = N(0,1) and phi(y) = y / gamma.
//!
//!   cargo run --release --example cell_problem

use slowfast::catalog;
use slowfast::cell::build_cell;
use std::time::Instant;

fn main() {
    let model = catalog::ou(1.0);
    let norm = 1.0 / (2.0 * std::f64::consts::PI).sqrt();

    println!("{:>7} {:>12} {:>12} {:>9}", "nodes", "rho sup err", "phi sup err", "time");
    let mut prev: Option<f64> = None;
    for nodes in [65usize, 129, 257, 513] {
        let grid = model.fast_grid(nodes);
        let t0 = Instant::now();
        // analytic = None forces the finite-difference stationary solve.
        let sol = build_cell(&model.coeffs, None, &[0.0], 0.0, &grid, None, None).unwrap();
        let elapsed = t0.elapsed();
        sol.check_invariants().unwrap();

        let mut rho_err = 0.0f64;
        let mut phi_err = 0.0f64;
        for idx in 0..grid.len() {
            let y = grid.node(idx)[0];
            rho_err = rho_err.max((sol.rho[idx] - norm * (-0.5 * y * y).exp()).abs());
            phi_err = phi_err.max((sol.phi[0][idx] - y).abs());
        }
        let ratio = prev.map(|p| format!("  ({:.2}x)", p / rho_err)).unwrap_or_default();
        println!(
            "{nodes:>7} {rho_err:>12.3e} {phi_err:>12.3e} {:>8.1?}{ratio}",
            elapsed
        );
        prev = Some(rho_err);
    }
    println!("\nsecond-order stencil: each grid halving should shrink the rho error ~4x");
}
