//! Rotated BEV IoU, 3D NMS and the camera projection round trip.
//!
//! Usage: cargo run --release --example geometry

use sparselif::geometry::{bev_rotated_iou, nms_3d, project_to_view, unproject_center, Box3D};
use sparselif::scenesim::{build_rig, SensorLayout};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let a = Box3D::new([10.0, 0.0, 0.8], [4.5, 1.9, 1.6], 0.0);
    for yaw in [0.0f64, 0.3, 0.785, 1.571] {
        let b = Box3D::new([10.5, 0.4, 0.8], [4.5, 1.9, 1.6], yaw);
        println!("yaw {:.3}  iou {:.4}", yaw, bev_rotated_iou(&a, &b));
    }

    let boxes = vec![
        a.clone().with_score(0.9),
        Box3D::new([10.3, 0.1, 0.8], [4.5, 1.9, 1.6], 0.05).with_score(0.8),
        Box3D::new([20.0, 5.0, 0.8], [0.8, 0.8, 1.7], 0.0).with_score(0.7),
    ];
    println!("nms keeps {:?}", nms_3d(&boxes, 0.5));

    let rig = build_rig(&SensorLayout::default(), 5.0, 0.0)?;
    let p = [12.0, 1.5, 0.7];
    for (v, view) in rig.views.iter().enumerate() {
        if let Some((u, w, depth)) = project_to_view(p, view) {
            let back = unproject_center(u, w, depth, view)?;
            let err = (0..3).map(|i| (back[i] - p[i]).abs()).fold(0.0, f64::max);
            println!("view {} pixel ({:.1}, {:.1}) depth {:.2}  round trip error {:.1e}", v, u, w, depth, err);
        }
    }
    Ok(())
}
