//! Generates a small dataset, trains briefly and evaluates clean and under
//! LiDAR object failure, all inside a temporary directory.
//!
//! Usage: cargo run --release --example train_and_eval [steps]

use sparselif::commands::{cmd_generate, cmd_train, evaluate_scenes, load_dataset, load_model, EvalOptions};
use sparselif::config::RunConfig;
use sparselif::scenesim::ScenarioSpec;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let steps: u64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(100);
    let dir = tempfile::tempdir()?;
    let mut cfg = RunConfig::default();
    cfg.sim.num_scenes = 16;
    cfg.train.steps = steps;
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    cmd_generate(&cfg, &data, false)?;
    let summary = cmd_train(&cfg, &data, &run, None)?;
    println!("trained to step {} (final loss {:?})", summary.last_step, summary.final_loss);

    let (decoder, _) = load_model(&cfg, Some(&summary.checkpoint), &EvalOptions::default())?;
    let (_, scenes) = load_dataset(&cfg, &data)?;
    for name in ["clean", "object_failure"] {
        let spec = ScenarioSpec::named(name, 1)?;
        let (m, u) = evaluate_scenes(&decoder, &scenes, &spec, false, &cfg.eval)?;
        println!(
            "{:<15} mAP {:.3}  NDS {:.3}  mean u_cam {:.3}  u_lid {:.3}",
            name, m.map, m.nds, u.u_cam, u.u_lid
        );
    }
    Ok(())
}
