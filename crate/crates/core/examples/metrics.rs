//! Scores jittered copies of the ground truth to show how AP, the
//! true-positive errors and the composite score react to localization noise.
//!
//! Usage: cargo run --release --example metrics

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparselif::eval::{distance_bins_csv, evaluate, EvalConfig, SampleDetections};
use sparselif::scenesim::{generate_dataset, SensorLayout, SimConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let sim = SimConfig { num_scenes: 16, ..SimConfig::default() };
    let scenes = generate_dataset(&SensorLayout::default(), &sim, 5, sim.num_scenes)?;
    let cfg = EvalConfig::default();
    for sigma in [0.0, 0.25, 0.5, 1.0, 2.0] {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples: Vec<SampleDetections> = scenes
            .iter()
            .map(|s| SampleDetections {
                gt: s.boxes.clone(),
                preds: s
                    .boxes
                    .iter()
                    .map(|b| {
                        let mut p = b.clone().with_score(rng.random_range(0.3..1.0));
                        p.center[0] += sigma * rng.random_range(-1.0..1.0);
                        p.center[1] += sigma * rng.random_range(-1.0..1.0);
                        p
                    })
                    .collect(),
            })
            .collect();
        let m = evaluate(&samples, &cfg)?;
        println!("jitter {:.2} m  mAP {:.3}  ATE {:.3}  NDS {:.3}", sigma, m.map, m.ate, m.nds);
        if sigma == 1.0 {
            print!("{}", distance_bins_csv(&m.distance_bins));
        }
    }
    Ok(())
}
