//! Tabulate the averaged drift w(x) and diffusion A(x) for the catalog
//! models and compare with the hand-derived values:
//!
//!   ou(gamma):          w = -x,        A = 1 + 2/gamma
//!   underdamped(gamma): w = -x/gamma,  A = 2/gamma     (Kramers-Smoluchowski)
//!
//!   cargo run --release --example averaging_table

use slowfast::averaging::{averaged_at, CellBank};
use slowfast::catalog;

fn main() {
    for (model, w_exact, a_exact) in [
        (catalog::ou(1.0), -1.0, 3.0),
        (catalog::ou(0.5), -1.0, 5.0),
        (catalog::underdamped(0.5), -2.0, 4.0),
    ] {
        println!("model: {}", model.name);
        let analytic = CellBank::new(
            model.coeffs.clone(),
            model.analytic_cell.clone(),
            model.fast_grid(257),
            None,
        );
        let fd = CellBank::new(model.coeffs.clone(), None, model.fast_grid(513), None);
        println!(
            "{:>6} {:>10} {:>10} {:>12} {:>12}",
            "x", "w", "A", "fd |dw|", "fd |dA|"
        );
        for &x in &[-1.5, -0.5, 0.0, 0.5, 1.5] {
            let p = averaged_at(&analytic, None, &[x], 0.0).unwrap();
            let q = averaged_at(&fd, None, &[x], 0.0).unwrap();
            println!(
                "{x:>6.2} {:>10.6} {:>10.6} {:>12.2e} {:>12.2e}",
                p.w[0],
                p.a[(0, 0)],
                (q.w[0] - p.w[0]).abs(),
                (q.a[(0, 0)] - p.a[(0, 0)]).abs()
            );
            assert!((p.w[0] - w_exact * x).abs() < 1e-6);
            assert!((p.a[(0, 0)] - a_exact).abs() < 1e-6);
        }
        println!();
    }
}
