//! Independent loop-based references and random instance builders shared by
//! the integration tests.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use sparselif::featuremaps::{CameraFeatureSet, FeatureMap, LidarFeaturePyramid};
use sparselif::geometry::{Box3D, CameraRig, DetectionRange, Rigid3};
use sparselif::rias::RiasConfig;
use sparselif::tensor::Tensor;

/// Texel centers sit at `i + 0.5`; taps outside the grid read zero.
pub fn ref_bilinear(map: &FeatureMap<f64>, x: f64, y: f64) -> Vec<f64> {
    let c = map.channels;
    let data = map.data.data();
    let (gx, gy) = (x - 0.5, y - 0.5);
    let (x0, y0) = (gx.floor(), gy.floor());
    let (fx, fy) = (gx - x0, gy - y0);
    let mut out = vec![0.0; c];
    for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
        for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
            let (xi, yi) = (x0 + dx, y0 + dy);
            if xi < 0.0 || yi < 0.0 || xi >= map.width as f64 || yi >= map.height as f64 {
                continue;
            }
            let base = (yi as usize * map.width + xi as usize) * c;
            for ch in 0..c {
                out[ch] += wx * wy * data[base + ch];
            }
        }
    }
    out
}

fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    let mut o = [0.0; 3];
    for i in 0..3 {
        for j in 0..3 {
            o[i] += m[i][j] * v[j];
        }
    }
    o
}

fn mat_t_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    let mut o = [0.0; 3];
    for i in 0..3 {
        for j in 0..3 {
            o[i] += m[j][i] * v[j];
        }
    }
    o
}

/// Frame-0 ego point expressed in frame `t`'s ego coordinates.
pub fn ref_align(p: [f64; 3], rig: &CameraRig, t: usize) -> [f64; 3] {
    let p0 = &rig.ego_poses[0];
    let pt = &rig.ego_poses[t];
    let w = mat_vec(&p0.rotation, p);
    let w = [0, 1, 2].map(|i| w[i] + p0.translation[i] - pt.translation[i]);
    mat_t_vec(&pt.rotation, w)
}

/// Pixel coordinates of `p` in `view` when it is in front of the camera by
/// more than 0.1 m and inside the image.
pub fn ref_project(p: [f64; 3], rig: &CameraRig, view: usize) -> Option<(f64, f64)> {
    let v = &rig.views[view];
    let c = mat_vec(&v.extrinsics.rotation, p);
    let c = [0, 1, 2].map(|i| c[i] + v.extrinsics.translation[i]);
    if c[2] <= 0.1 {
        return None;
    }
    let k = mat_vec(&v.intrinsics, c);
    let (u, w) = (k[0] / c[2], k[1] / c[2]);
    let (iw, ih) = (v.image_size.0 as f64, v.image_size.1 as f64);
    (u >= 0.0 && u < iw && w >= 0.0 && w < ih).then_some((u, w))
}

/// Dense LiDAR reference: `[N, K, C]` flattened.
pub fn ref_sample_lidar(
    centers: &[[f64; 2]],
    offsets: &[f64],
    weights: &[f64],
    maps: &[FeatureMap<f64>],
    range: &DetectionRange,
    cfg: &RiasConfig,
) -> Vec<f64> {
    let (r_n, k_n, c) = (cfg.lidar_scales, cfg.points, cfg.channels);
    let mut out = vec![0.0; centers.len() * k_n * c];
    for (n, ctr) in centers.iter().enumerate() {
        for k in 0..k_n {
            for (r, map) in maps.iter().enumerate() {
                let o = ((n * r_n + r) * k_n + k) * 2;
                let px = ctr[0] + offsets[o];
                let py = ctr[1] + offsets[o + 1];
                let x = (px - range.x.0) / (range.x.1 - range.x.0) * map.width as f64;
                let y = (py - range.y.0) / (range.y.1 - range.y.0) * map.height as f64;
                let s = ref_bilinear(map, x, y);
                let w = weights[n * r_n * k_n + r * k_n + k];
                for ch in 0..c {
                    out[(n * k_n + k) * c + ch] += w * s[ch];
                }
            }
        }
    }
    out
}

/// Dense camera reference: `[N, T*K, C]` flattened.
pub fn ref_sample_camera(
    centers: &[[f64; 3]],
    offsets: &[f64],
    weights: &[f64],
    set: &CameraFeatureSet<f64>,
    rig: &CameraRig,
    cfg: &RiasConfig,
) -> Vec<f64> {
    let (t_n, k_n, m_n, c) = (cfg.frames, cfg.points, cfg.camera_scales, cfg.channels);
    let v_n = rig.views.len();
    let mut out = vec![0.0; centers.len() * t_n * k_n * c];
    for (n, ctr) in centers.iter().enumerate() {
        for t in 0..t_n {
            for k in 0..k_n {
                let o = ((n * t_n + t) * k_n + k) * 3;
                let p = [0, 1, 2].map(|d| ctr[d] + offsets[o + d]);
                let q = ref_align(p, rig, t);
                let hits: Vec<(usize, (f64, f64))> =
                    (0..v_n).filter_map(|v| ref_project(q, rig, v).map(|uv| (v, uv))).collect();
                if hits.is_empty() {
                    continue;
                }
                let row = (n * t_n + t) * k_n + k;
                for &(v, (u, w)) in &hits {
                    for m in 0..m_n {
                        let stride = set.strides[m];
                        let s = ref_bilinear(set.get(v, m, t), u / stride, w / stride);
                        let wt = weights[(n * t_n + t) * m_n * k_n + m * k_n + k] / hits.len() as f64;
                        for ch in 0..c {
                            out[row * c + ch] += wt * s[ch];
                        }
                    }
                }
            }
        }
    }
    out
}

/// A random sampling instance; every dimension varies with the seed.
pub struct SamplingCase {
    pub cfg: RiasConfig,
    pub rig: CameraRig,
    pub range: DetectionRange,
    pub lidar: LidarFeaturePyramid<f64>,
    pub camera: CameraFeatureSet<f64>,
    pub centers: Vec<[f64; 3]>,
    pub lidar_offsets: Vec<f64>,
    pub lidar_weights: Vec<f64>,
    pub camera_offsets: Vec<f64>,
    pub camera_weights: Vec<f64>,
}

fn random_map(w: usize, h: usize, c: usize, scale: usize, rng: &mut ChaCha8Rng) -> FeatureMap<f64> {
    FeatureMap::from_tensor(Tensor::from_fn(&[h, w, c], |_| rng.random_range(-1.0..1.0)), scale).unwrap()
}

impl SamplingCase {
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let v_n = rng.random_range(1..=6);
        let m_n = rng.random_range(1..=3);
        let r_n = rng.random_range(1..=3);
        let t_n = rng.random_range(1..=3);
        let k_n = rng.random_range(1..=6);
        let c = rng.random_range(1..=5);
        let n = rng.random_range(1..=5);
        let cfg = RiasConfig {
            channels: c,
            points: k_n,
            lidar_scales: r_n,
            camera_scales: m_n,
            frames: t_n,
            offset_factor: 2.0,
        };
        let image = (rng.random_range(16..48), rng.random_range(12..36));
        let poses = (0..t_n)
            .map(|t| {
                Rigid3::from_yaw(
                    rng.random_range(-0.1..0.1) * t as f64,
                    [-rng.random_range(0.0..2.0) * t as f64, rng.random_range(-0.3..0.3), 0.0],
                )
            })
            .collect();
        let rig = CameraRig::surround(v_n, rng.random_range(60.0..150.0), image, rng.random_range(1.0..1.8), poses).unwrap();
        let strides: Vec<f64> = [2.0, 4.0, 8.0][..m_n].to_vec();
        let mut maps = Vec::new();
        for _v in 0..v_n {
            for (m, s) in strides.iter().enumerate() {
                for _t in 0..t_n {
                    let w = (image.0 as f64 / s).ceil() as usize;
                    let h = (image.1 as f64 / s).ceil() as usize;
                    maps.push(random_map(w, h, c, m, rng));
                }
            }
        }
        let camera = CameraFeatureSet::new(v_n, m_n, t_n, strides, maps).unwrap();
        let range = DetectionRange {
            x: (-20.0, 20.0),
            y: (-16.0, 16.0),
            z: (-3.0, 3.0),
        };
        let grid = rng.random_range(8..24);
        let lidar_maps = (0..r_n).map(|r| random_map(grid >> r.min(2), grid >> r.min(2), c, r, rng)).collect();
        let lidar = LidarFeaturePyramid::new(range, lidar_maps).unwrap();
        let centers = (0..n)
            .map(|_| [rng.random_range(-15.0..15.0), rng.random_range(-12.0..12.0), rng.random_range(-0.5..2.0)])
            .collect();
        let u = |len: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..len).map(|_| rng.random_range(lo..hi)).collect()
        };
        Self {
            lidar_offsets: u(n * r_n * k_n * 2, -2.0, 2.0, rng),
            lidar_weights: u(n * r_n * k_n, 0.0, 1.0, rng),
            camera_offsets: u(n * t_n * k_n * 3, -2.0, 2.0, rng),
            camera_weights: u(n * t_n * m_n * k_n, 0.0, 1.0, rng),
            cfg,
            rig,
            range,
            lidar,
            camera,
            centers,
        }
    }

    pub fn boxes(&self) -> Vec<Box3D> {
        self.centers.iter().map(|&c| Box3D::new(c, [4.0, 2.0, 1.5], 0.0)).collect()
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Greedy NMS by repeated arg-max over the live set.
pub fn brute_force_nms(boxes: &[Box3D], threshold: f64) -> Vec<usize> {
    let mut alive: Vec<bool> = vec![true; boxes.len()];
    let mut keep = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..boxes.len() {
            if alive[i] && best.is_none_or(|b| boxes[i].score > boxes[b].score) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        keep.push(b);
        alive[b] = false;
        for j in 0..boxes.len() {
            if alive[j] && sparselif::geometry::bev_rotated_iou(&boxes[b], &boxes[j]) > threshold {
                alive[j] = false;
            }
        }
    }
    keep
}

/// Minimum total cost over all assignments of the shorter side.
pub fn exhaustive_assignment(cost: &[Vec<f64>]) -> f64 {
    let rows = cost.len();
    let cols = cost[0].len();
    fn rec(cost: &[Vec<f64>], r: usize, used: &mut Vec<bool>, transpose: bool) -> f64 {
        let (rows, cols) = if transpose {
            (cost[0].len(), cost.len())
        } else {
            (cost.len(), cost[0].len())
        };
        if r == rows {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for c in 0..cols {
            if !used[c] {
                used[c] = true;
                let v = if transpose { cost[c][r] } else { cost[r][c] };
                best = best.min(v + rec(cost, r + 1, used, transpose));
                used[c] = false;
            }
        }
        best
    }
    if rows <= cols {
        rec(cost, 0, &mut vec![false; cols], false)
    } else {
        rec(cost, 0, &mut vec![false; rows], true)
    }
}

/// Fraction of `samples` uniform points in the joint bounding rectangle
/// lying in both rectangles, over the fraction lying in either.
pub fn monte_carlo_iou(a: &Box3D, b: &Box3D, samples: usize, rng: &mut ChaCha8Rng) -> f64 {
    let corners: Vec<[f64; 2]> = [a, b].iter().flat_map(|x| sparselif::geometry::bev_corners(x)).collect();
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for c in &corners {
        for d in 0..2 {
            lo[d] = lo[d].min(c[d]);
            hi[d] = hi[d].max(c[d]);
        }
    }
    let inside = |bx: &Box3D, p: [f64; 2]| {
        let (s, c) = bx.yaw.sin_cos();
        let (dx, dy) = (p[0] - bx.center[0], p[1] - bx.center[1]);
        let (lx, ly) = (c * dx + s * dy, -s * dx + c * dy);
        lx.abs() <= bx.size[0] / 2.0 && ly.abs() <= bx.size[1] / 2.0
    };
    let (mut both, mut either) = (0usize, 0usize);
    for _ in 0..samples {
        let p = [rng.random_range(lo[0]..hi[0]), rng.random_range(lo[1]..hi[1])];
        let (ia, ib) = (inside(a, p), inside(b, p));
        both += (ia && ib) as usize;
        either += (ia || ib) as usize;
    }
    if either == 0 {
        0.0
    } else {
        both as f64 / either as f64
    }
}

pub fn random_box(rng: &mut ChaCha8Rng, spread: f64) -> Box3D {
    Box3D::new(
        [rng.random_range(-spread..spread), rng.random_range(-spread..spread), rng.random_range(-1.0..1.0)],
        [rng.random_range(0.4..5.0), rng.random_range(0.4..3.0), rng.random_range(0.5..2.5)],
        rng.random_range(-3.2..3.2),
    )
}
pub mod criteria;
