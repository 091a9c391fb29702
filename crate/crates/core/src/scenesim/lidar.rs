use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{center_at, SensorLayout, SimConfig, CLASSES, LIDAR_HEIGHT};
use crate::error::Result;
use crate::featuremaps::{FeatureMap, LidarFeaturePyramid};
use crate::geometry::{bev_corners, project_to_bev, Box3D, CameraRig};
use crate::tensor::Tensor;

/// One LiDAR return in its sweep's ego frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LidarPoint {
    pub pos: [f32; 3],
    pub intensity: f32,
    /// Index of the object hit, or -1 for ground clutter.
    pub object: i32,
}

pub(crate) const HAND_FEATURES: usize = 5;
const EMBED_SEED: u64 = 0x5eed_b0e7;
const CLUTTER_INTENSITY: f32 = 0.1;

/// Boxes of the scene moved to frame `t` and expressed in that frame's ego
/// coordinates.
pub(crate) fn boxes_in_frame(boxes: &[Box3D], rig: &CameraRig, t: usize, dt: f64) -> Vec<Box3D> {
    let inv = rig.ego_poses[t].inverse();
    let r = &rig.ego_poses[t].rotation;
    let ego_yaw = r[1][0].atan2(r[0][0]);
    boxes
        .iter()
        .map(|b| {
            let mut moved = b.clone();
            moved.center = inv.apply(center_at(b, t, dt));
            moved.yaw = crate::geometry::normalize_yaw(b.yaw - ego_yaw);
            moved
        })
        .collect()
}

/// Parameter along `o -> p` at which the segment enters the box volume, if it
/// does.
fn segment_hits_box(o: [f64; 3], p: [f64; 3], b: &Box3D) -> Option<f64> {
    let (s, c) = b.yaw.sin_cos();
    let local = |q: [f64; 3]| {
        let dx = q[0] - b.center[0];
        let dy = q[1] - b.center[1];
        [c * dx + s * dy, -s * dx + c * dy]
    };
    let (lo, lp) = (local(o), local(p));
    let half = [b.size[0] / 2.0, b.size[1] / 2.0];
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for a in 0..2 {
        let d = lp[a] - lo[a];
        if d.abs() < 1e-12 {
            if lo[a].abs() > half[a] {
                return None;
            }
            continue;
        }
        let (mut ta, mut tb) = ((-half[a] - lo[a]) / d, (half[a] - lo[a]) / d);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
        if t0 > t1 {
            return None;
        }
    }
    let bottom = b.center[2] - b.size[2] / 2.0;
    let top = b.center[2] + b.size[2] / 2.0;
    let z = |t: f64| o[2] + t * (p[2] - o[2]);
    let (za, zb) = (z(t0), z(t1));
    (za.min(zb) <= top && za.max(zb) >= bottom).then_some(t0)
}

/// Simulated sweep of frame `t`: returns on the sensor-facing vertical faces
/// of each box with density falling off as `1/d²`, minus occluded returns,
/// plus uniform ground clutter.
pub fn lidar_points(
    boxes: &[Box3D],
    rig: &CameraRig,
    t: usize,
    layout: &SensorLayout,
    cfg: &SimConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<LidarPoint> {
    let local = boxes_in_frame(boxes, rig, t, layout.frame_dt);
    let origin = [0.0, 0.0, LIDAR_HEIGHT];
    let noise = Normal::new(0.0, cfg.lidar_range_noise.max(1e-12)).expect("valid normal");
    let mut out = Vec::new();
    for (i, b) in local.iter().enumerate() {
        let corners = bev_corners(b);
        let bottom = b.center[2] - b.size[2] / 2.0;
        let h = b.size[2];
        for j in 0..4 {
            let (a, e) = (corners[j], corners[(j + 1) % 4]);
            let (dx, dy) = (e[0] - a[0], e[1] - a[1]);
            let len = dx.hypot(dy);
            let normal = [dy / len, -dx / len];
            let mid = [(a[0] + e[0]) / 2.0, (a[1] + e[1]) / 2.0, bottom + h / 2.0];
            let to_sensor = [origin[0] - mid[0], origin[1] - mid[1]];
            let facing = normal[0] * to_sensor[0] + normal[1] * to_sensor[1];
            if facing <= 0.0 {
                continue;
            }
            let dist = ((mid[0] - origin[0]).powi(2) + (mid[1] - origin[1]).powi(2) + (mid[2] - origin[2]).powi(2))
                .sqrt();
            let cos = facing / to_sensor[0].hypot(to_sensor[1]);
            let expected = cfg.lidar_density * len * h * cos * (10.0 / dist).powi(2);
            let count = expected.round() as usize;
            for _ in 0..count {
                let s: f64 = rng.random();
                let z = bottom + rng.random::<f64>() * h;
                let mut p = [a[0] + s * dx, a[1] + s * dy, z];
                let ray = [p[0] - origin[0], p[1] - origin[1], p[2] - origin[2]];
                let n = (ray[0] * ray[0] + ray[1] * ray[1] + ray[2] * ray[2]).sqrt();
                let jitter = noise.sample(rng);
                for k in 0..3 {
                    p[k] += jitter * ray[k] / n;
                }
                let occluded = local
                    .iter()
                    .enumerate()
                    .any(|(k, o)| k != i && segment_hits_box(origin, p, o).is_some_and(|t| t < 1.0));
                if !occluded {
                    out.push(LidarPoint {
                        pos: p.map(|v| v as f32),
                        intensity: CLASSES[b.class_id].intensity as f32,
                        object: i as i32,
                    });
                }
            }
        }
    }
    let r = &layout.range;
    let ground = Normal::new(0.0, 0.05).expect("valid normal");
    for _ in 0..cfg.clutter_points {
        let x = rng.random_range(r.x.0..r.x.1);
        let y = rng.random_range(r.y.0..r.y.1);
        let z = ground.sample(rng);
        out.push(LidarPoint {
            pos: [x as f32, y as f32, z as f32],
            intensity: CLUTTER_INTENSITY,
            object: -1,
        });
    }
    out
}

/// Fixed `[HAND_FEATURES, C]` embedding of the per-cell pillar statistics.
pub(crate) fn pillar_embedding(channels: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(EMBED_SEED);
    let normal = Normal::new(0.0, 0.5).expect("valid normal");
    (0..HAND_FEATURES * channels).map(|_| normal.sample(&mut rng)).collect()
}

/// Per-cell pillar statistics `[ln(1+n), max z / 3, mean intensity, mean dx,
/// mean dy]` (offsets relative to the cell center, in cells) on a `grid²`
/// raster. Empty cells are all zero.
pub(crate) fn pillar_statistics(points: &[LidarPoint], layout: &SensorLayout) -> Result<Vec<[f64; HAND_FEATURES]>> {
    let g = layout.lidar_grid;
    let mut count = vec![0usize; g * g];
    let mut maxz = vec![f64::NEG_INFINITY; g * g];
    let mut sums = vec![[0.0f64; 3]; g * g];
    for p in points {
        let pos = p.pos.map(f64::from);
        let (u, v) = project_to_bev(pos, &layout.range, (g, g))?;
        if !(u >= 0.0 && v >= 0.0 && u < g as f64 && v < g as f64) {
            continue;
        }
        let (cx, cy) = (u.floor(), v.floor());
        let cell = cy as usize * g + cx as usize;
        count[cell] += 1;
        maxz[cell] = maxz[cell].max(pos[2]);
        sums[cell][0] += f64::from(p.intensity);
        sums[cell][1] += u - (cx + 0.5);
        sums[cell][2] += v - (cy + 0.5);
    }
    Ok((0..g * g)
        .map(|cell| {
            let n = count[cell];
            if n == 0 {
                return [0.0; HAND_FEATURES];
            }
            let nf = n as f64;
            [
                (1.0 + nf).ln(),
                maxz[cell] / 3.0,
                sums[cell][0] / nf,
                sums[cell][1] / nf,
                sums[cell][2] / nf,
            ]
        })
        .collect())
}

/// Embeds pillar statistics of a sweep into a BEV pyramid. Scale 0 is the
/// full grid; each coarser scale mean-pools 2x2 blocks of the previous one.
pub fn lidar_bev_features(points: &[LidarPoint], layout: &SensorLayout) -> Result<LidarFeaturePyramid<f32>> {
    let g = layout.lidar_grid;
    let c = layout.channels;
    let stats = pillar_statistics(points, layout)?;
    let embed = pillar_embedding(c);
    let mut fine = vec![0.0f32; g * g * c];
    for (cell, h) in stats.iter().enumerate() {
        if h[0] == 0.0 {
            continue;
        }
        let out = &mut fine[cell * c..(cell + 1) * c];
        for (ch, o) in out.iter_mut().enumerate() {
            let v: f64 = (0..HAND_FEATURES).map(|k| h[k] * embed[k * c + ch]).sum();
            *o = v as f32;
        }
    }
    let mut maps = vec![FeatureMap::from_tensor(Tensor::new(vec![g, g, c], fine)?, 0)?];
    for r in 1..layout.lidar_scales {
        let prev = &maps[r - 1];
        let gs = layout.lidar_grid_at(r);
        let mut next = FeatureMap::zeros(gs, gs, c, r);
        for y in 0..gs {
            for x in 0..gs {
                let out = next.texel_mut(x, y);
                for dy in 0..2 {
                    for dx in 0..2 {
                        for (o, &v) in out.iter_mut().zip(prev.texel(2 * x + dx, 2 * y + dy)) {
                            *o += v;
                        }
                    }
                }
                for o in out.iter_mut() {
                    *o *= 0.25;
                }
            }
        }
        maps.push(next);
    }
    LidarFeaturePyramid::new(layout.range, maps)
}
