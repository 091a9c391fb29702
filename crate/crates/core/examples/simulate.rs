//! Simulates one scene and shows what each corruption scenario does to it.
//!
//! Usage: cargo run --release --example simulate [seed]

use sparselif::scenesim::{apply_scenario, generate_scene, ScenarioSpec, SensorLayout, SimConfig};

const SCENARIOS: [&str; 6] = ["clean", "fov120", "fov180", "object_failure", "front_occlusion", "stuck"];

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed: u64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(3);
    let layout = SensorLayout::default();
    let scene = generate_scene(&layout, &SimConfig::default(), seed, 0)?;
    println!("{} objects, {} views, {} frames", scene.boxes.len(), scene.rig.num_views(), scene.rig.num_frames());
    for b in &scene.boxes {
        println!(
            "  class {} at ({:6.2}, {:6.2}) yaw {:5.2} speed ({:.1}, {:.1})",
            b.class_id, b.center[0], b.center[1], b.yaw, b.velocity[0], b.velocity[1]
        );
    }
    let scenes: Vec<_> = (0..8).map(|id| generate_scene(&layout, &SimConfig::default(), seed, id)).collect::<Result<_, _>>()?;
    println!("over {} scenes:", scenes.len());
    for name in SCENARIOS {
        let spec = ScenarioSpec::named(name, seed)?;
        let (mut total, mut returns, mut blank, mut stale) = (0, 0, 0, 0);
        for scene in &scenes {
            let s = apply_scenario(scene, &spec, &layout)?;
            total += s.points.iter().map(Vec::len).sum::<usize>();
            returns += s.points.iter().flatten().filter(|p| p.object >= 0).count();
            blank += (s.camera != scene.camera && s.camera.get(0, 0, 0).is_zero()) as usize;
            stale += (s.camera != scene.camera && !s.camera.get(0, 0, 0).is_zero()) as usize;
        }
        println!(
            "{:<16} lidar points {:>6}  object returns {:>6}  blank front cam {}  stale cam {}",
            name, total, returns, blank, stale
        );
    }
    Ok(())
}
