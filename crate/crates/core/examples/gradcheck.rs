//! Finite-difference check of every differentiable op.
//!
//! ```text
//! cargo run --example gradcheck -- [instances]
//! ```

use shapefactor::autodiff::gradcheck::op_suite;
use std::time::Instant;

fn main() -> shapefactor::Result<()> {
    let instances = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(20);
    let start = Instant::now();
    let report = op_suite(0, instances)?;
    for c in &report {
        println!(
            "{:<22} {:>3} instances  max rel err {:.2e}  (tol {:.0e})  {}",
            c.op,
            c.instances,
            c.max_rel_err,
            c.tolerance,
            if c.passed() { "ok" } else { "FAIL" }
        );
    }
    println!("{:.2}s", start.elapsed().as_secs_f64());
    if report.iter().any(|c| !c.passed()) {
        std::process::exit(1);
    }
    Ok(())
}
