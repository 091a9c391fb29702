//! NDS drops of a trained checkpoint across every corruption scenario.
//!
//! Usage: cargo run --release --example robustness <dataset dir> <checkpoint> <dataset seed> [--oracle]

use std::path::PathBuf;

use sparselif::commands::{cmd_robustness, EvalOptions};
use sparselif::config::RunConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let [dataset, checkpoint, seed, ..] = args.as_slice() else {
        return Err("usage: robustness <dataset dir> <checkpoint> <dataset seed> [--oracle]".into());
    };
    let opts = EvalOptions {
        fusion: None,
        oracle_uncertainty: args.iter().any(|a| a == "--oracle"),
    };
    let out = tempfile::tempdir()?;
    let mut cfg = RunConfig::default();
    cfg.seed = seed.parse()?;
    cfg.scenario.seed = cfg.seed;
    let r = cmd_robustness(&cfg, Some(&PathBuf::from(checkpoint)), &PathBuf::from(dataset), out.path(), &opts)?;
    println!("clean NDS {:.4}", r.clean.metrics.nds);
    for s in &r.scenarios {
        println!("{:<18} NDS {:.4}  drop {:+.4}", s.report.scenario, s.report.metrics.nds, s.nds_drop);
    }
    Ok(())
}
