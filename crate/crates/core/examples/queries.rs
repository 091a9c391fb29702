//! Builds the query set of one scene and reports where the queries came
//! from and how close the proposal queries start to the ground truth.
//!
//! Usage: cargo run --release --example queries

use sparselif::decoder::{Decoder, ModelConfig};
use sparselif::paqg::QueryOrigin;
use sparselif::scenesim::{generate_scene, SensorLayout, SimConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let layout = SensorLayout::default();
    let scene = generate_scene(&layout, &SimConfig::default(), 11, 0)?;
    let decoder = Decoder::<f32>::new(ModelConfig::default(), layout, 0)?;
    let queries = decoder.queries(scene.id, &scene.boxes, &scene.camera, &scene.rig)?;
    let count = |o: QueryOrigin| queries.iter().filter(|q| q.origin == o).count();
    println!(
        "{} queries: {} proposals, {} padding, {} random",
        queries.len(),
        count(QueryOrigin::Proposal),
        count(QueryOrigin::Padding),
        count(QueryOrigin::Random)
    );
    for q in queries.iter().filter(|q| q.origin == QueryOrigin::Proposal) {
        let d = scene.boxes.iter().map(|g| q.bbox.bev_distance(g)).fold(f64::INFINITY, f64::min);
        println!(
            "  proposal at ({:6.2}, {:6.2}) score {:.2}  nearest object {:.2} m",
            q.bbox.center[0], q.bbox.center[1], q.bbox.score, d
        );
    }
    Ok(())
}
