//! Finite-difference check of every differentiable op over a few seeds.
//!
//! Usage: cargo run --release --example gradient_check [seeds]

use sparselif::gradsuite::run_suite;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seeds: u64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(10);
    let t0 = std::time::Instant::now();
    for s in run_suite(0..seeds, 1e-4)? {
        println!(
            "{:<20} seeds {:>4}  max rel err {:.2e} (seed {})  {}",
            s.op,
            s.seeds,
            s.max_rel_error,
            s.worst_seed,
            if s.passed { "ok" } else { "FAIL" }
        );
    }
    println!("elapsed {:.1?}", t0.elapsed());
    Ok(())
}
