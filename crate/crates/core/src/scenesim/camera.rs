use std::f64::consts::PI;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::lidar::boxes_in_frame;
use super::{SensorLayout, NUM_CLASSES};
use crate::error::Result;
use crate::featuremaps::{CameraFeatureSet, FeatureMap};
use crate::geometry::{project_to_view, Box3D, CameraRig};

/// Channels carrying object content: class one-hot, inverse depth, projected
/// height, blob amplitude. The rest hold a fixed positional encoding.
pub(crate) const OBJECT_CHANNELS: usize = NUM_CLASSES + 3;

const MIN_AMPLITUDE: f64 = 1e-3;

/// Positional encoding channel `k` at normalized image coordinates `(x, y)`.
pub fn positional_channel(k: usize, x: f64, y: f64) -> f64 {
    let freq = (1u32 << ((k / 4) % 5)) as f64 * PI;
    0.5 * match k % 4 {
        0 => (freq * x).sin(),
        1 => (freq * x).cos(),
        2 => (freq * y).sin(),
        _ => (freq * y).cos(),
    }
}

struct Blob {
    u: f64,
    v: f64,
    sigma: f64,
    class_id: usize,
    inv_depth: f64,
    height: f64,
}

fn blobs_for(boxes: &[Box3D], rig: &CameraRig, view: usize, t: usize, dt: f64) -> Vec<Blob> {
    let cam = &rig.views[view];
    let (f, _) = cam.focal();
    let img_h = cam.image_size.1 as f64;
    boxes_in_frame(boxes, rig, t, dt)
        .iter()
        .filter_map(|b| {
            let (u, v, depth) = project_to_view(b.center, cam)?;
            let radius = f * 0.5 * b.size[0].hypot(b.size[1]) / depth;
            Some(Blob {
                u,
                v,
                sigma: (0.5 * radius).clamp(1.5, 24.0),
                class_id: b.class_id,
                inv_depth: (10.0 / depth).min(5.0),
                height: f * b.size[2] / depth / img_h,
            })
        })
        .collect()
}

/// Procedural camera features: at every texel the object blob with the
/// largest Gaussian amplitude writes its class one-hot, inverse depth and
/// projected height (all scaled by the amplitude) plus the amplitude itself;
/// remaining channels carry a positional encoding. Seeded Gaussian noise is
/// added everywhere.
pub fn camera_features(
    boxes: &[Box3D],
    rig: &CameraRig,
    layout: &SensorLayout,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Result<CameraFeatureSet<f32>> {
    let c = layout.channels;
    let (img_w, img_h) = (layout.image_size.0 as f64, layout.image_size.1 as f64);
    let normal = Normal::new(0.0, noise.max(1e-12)).expect("valid normal");
    let mut maps = Vec::with_capacity(layout.num_views * layout.camera_strides.len() * layout.num_frames);
    for v in 0..layout.num_views {
        for (m, &stride) in layout.camera_strides.iter().enumerate() {
            for t in 0..layout.num_frames {
                let blobs = blobs_for(boxes, rig, v, t, layout.frame_dt);
                let (w, h) = layout.camera_grid_at(m);
                let mut map = FeatureMap::zeros(w, h, c, m);
                for y in 0..h {
                    for x in 0..w {
                        let px = (x as f64 + 0.5) * stride;
                        let py = (y as f64 + 0.5) * stride;
                        let mut best: Option<(f64, &Blob)> = None;
                        for b in &blobs {
                            let d2 = (px - b.u).powi(2) + (py - b.v).powi(2);
                            let a = (-d2 / (2.0 * b.sigma * b.sigma)).exp();
                            if a >= MIN_AMPLITUDE && best.is_none_or(|(ba, _)| a > ba) {
                                best = Some((a, b));
                            }
                        }
                        let texel = map.texel_mut(x, y);
                        if let Some((a, b)) = best {
                            texel[b.class_id] = a as f32;
                            texel[NUM_CLASSES] = (a * b.inv_depth) as f32;
                            texel[NUM_CLASSES + 1] = (a * b.height) as f32;
                            texel[NUM_CLASSES + 2] = a as f32;
                        }
                        for (k, out) in texel[OBJECT_CHANNELS..].iter_mut().enumerate() {
                            *out = positional_channel(k, px / img_w, py / img_h) as f32;
                        }
                        if noise > 0.0 {
                            for out in texel.iter_mut() {
                                *out += normal.sample(rng) as f32;
                            }
                        }
                    }
                }
                maps.push(map);
            }
        }
    }
    CameraFeatureSet::new(
        layout.num_views,
        layout.camera_strides.len(),
        layout.num_frames,
        layout.camera_strides.clone(),
        maps,
    )
}
