//! Verify analytic gradients against central finite differences at f64
//! for every layer kind and a small composite network with deep
//! supervision and L2 regularization.
//!
//! ```text
//! cargo run --example gradcheck_layers
//! ```

use mpseg::nn::{standard_layer_checks, GRAD_TOL};

fn main() -> mpseg::Result<()> {
    let mut worst = 0.0f64;
    for seed in [1u64, 2, 3] {
        println!("seed {seed}:");
        for (name, report) in standard_layer_checks(seed)? {
            println!(
                "  {name:28} {:7} elements, max rel err {:.3e}",
                report.checked, report.max_rel_err
            );
            worst = worst.max(report.max_rel_err);
        }
    }
    println!("worst relative error over all checks: {worst:.3e} (tolerance {GRAD_TOL:.0e})");
    assert!(worst <= GRAD_TOL);
    Ok(())
}
