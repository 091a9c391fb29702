//! Single-thread latency of the sampling, mixing and layer kernels at the
//! default shape and at twice the query count.
//!
//! Usage: cargo run --release --example bench [repetitions]

use sparselif::bench::{bench_kernel, KERNELS};
use sparselif::decoder::ModelConfig;
use sparselif::scenesim::SensorLayout;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let reps: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(50);
    let layout = SensorLayout::default();
    let base = ModelConfig::default();
    let mut doubled = base.clone();
    doubled.queries.num_queries *= 2;
    for kernel in KERNELS {
        let a = bench_kernel(kernel, &base, &layout, reps, 0)?;
        let b = bench_kernel(kernel, &doubled, &layout, reps, 0)?;
        println!(
            "{:<14} p50 {:.4} ms  p99 {:.4} ms  {:>9.0} q/s   2x queries: ratio {:.2}",
            kernel,
            a.p50_ms,
            a.p99_ms,
            a.queries_per_second,
            b.p50_ms / a.p50_ms
        );
        for s in &a.stages {
            println!("    {:<12} {:.4} ms", s.stage, s.mean_ms);
        }
    }
    Ok(())
}
