//! Synthetic scenes: ground-truth boxes, simulated LiDAR sweeps, procedural
//! BEV and camera feature pyramids, ego motion, and sensor-failure scenarios.

mod camera;
mod dataset;
mod lidar;
mod scenario;

pub use camera::{camera_features, positional_channel};
pub use dataset::{read_dataset, read_manifest, write_dataset, Manifest, ManifestScene, FORMAT_VERSION};
pub use lidar::{lidar_bev_features, lidar_points, LidarPoint};
pub use scenario::{apply_scenario, fov_keeps, ScenarioKind, ScenarioSpec, StuckSensor};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featuremaps::{CameraFeatureSet, LidarFeaturePyramid};
use crate::geometry::{bev_rotated_iou, Box3D, CameraRig, DetectionRange, Rigid3};

/// Object category with its nominal `(l, w, h)` and LiDAR intensity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectClass {
    pub name: &'static str,
    pub size: [f64; 3],
    pub intensity: f64,
    pub max_speed: f64,
}

pub const CLASSES: [ObjectClass; 3] = [
    ObjectClass {
        name: "car",
        size: [4.5, 1.9, 1.6],
        intensity: 0.8,
        max_speed: 3.0,
    },
    ObjectClass {
        name: "pedestrian",
        size: [0.7, 0.7, 1.75],
        intensity: 0.4,
        max_speed: 1.5,
    },
    ObjectClass {
        name: "barrier",
        size: [0.5, 2.5, 1.0],
        intensity: 0.6,
        max_speed: 0.0,
    },
];

pub const NUM_CLASSES: usize = CLASSES.len();

/// Height of the LiDAR origin above the ground.
pub const LIDAR_HEIGHT: f64 = 1.8;

/// Sensor geometry shared by the simulator and the decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorLayout {
    pub num_views: usize,
    pub hfov_deg: f64,
    pub image_size: (usize, usize),
    pub mount_height: f64,
    /// Pixels per texel, one entry per camera scale.
    pub camera_strides: Vec<f64>,
    pub num_frames: usize,
    pub frame_dt: f64,
    /// Finest BEV grid size (cells per side); scale `r` has `grid >> r`.
    pub lidar_grid: usize,
    pub lidar_scales: usize,
    pub channels: usize,
    pub range: DetectionRange,
}

impl Default for SensorLayout {
    fn default() -> Self {
        Self {
            num_views: 4,
            hfov_deg: 100.0,
            image_size: (160, 96),
            mount_height: 1.6,
            camera_strides: vec![4.0, 8.0],
            num_frames: 2,
            frame_dt: 0.5,
            lidar_grid: 128,
            lidar_scales: 2,
            channels: 32,
            range: DetectionRange::default(),
        }
    }
}

impl SensorLayout {
    pub fn validate(&self) -> Result<()> {
        self.range.validate()?;
        if self.num_views == 0 || self.num_frames == 0 || self.lidar_scales == 0 {
            return Err(Error::invalid("views, frames and lidar scales must be positive"));
        }
        if self.camera_strides.is_empty() || self.camera_strides.iter().any(|s| !(*s >= 1.0)) {
            return Err(Error::invalid("camera strides must be >= 1"));
        }
        if self.channels < camera::OBJECT_CHANNELS {
            return Err(Error::invalid(format!(
                "at least {} feature channels are required",
                camera::OBJECT_CHANNELS
            )));
        }
        if self.lidar_grid >> (self.lidar_scales - 1) == 0 {
            return Err(Error::invalid("lidar grid too small for the number of scales"));
        }
        if !(self.hfov_deg > 0.0 && self.hfov_deg < 180.0) {
            return Err(Error::invalid("camera field of view must be in (0, 180) degrees"));
        }
        Ok(())
    }

    pub fn lidar_grid_at(&self, scale: usize) -> usize {
        self.lidar_grid >> scale
    }

    pub fn camera_grid_at(&self, scale: usize) -> (usize, usize) {
        let s = self.camera_strides[scale];
        (
            (self.image_size.0 as f64 / s).ceil() as usize,
            (self.image_size.1 as f64 / s).ceil() as usize,
        )
    }
}

/// Object population and sensor noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub num_scenes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Class sampling probabilities in [`CLASSES`] order.
    pub class_mix: [f64; NUM_CLASSES],
    /// Radial placement band around the ego vehicle in meters.
    pub min_radius: f64,
    pub max_radius: f64,
    pub ego_speed: f64,
    pub max_yaw_rate: f64,
    /// LiDAR returns per square meter of face area at 10 m.
    pub lidar_density: f64,
    pub lidar_range_noise: f64,
    pub clutter_points: usize,
    pub camera_noise: f64,
    pub size_jitter: f64,
    pub max_attempts: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            num_scenes: 64,
            min_objects: 2,
            max_objects: 8,
            class_mix: [0.5, 0.3, 0.2],
            min_radius: 4.0,
            max_radius: 40.0,
            ego_speed: 5.0,
            max_yaw_rate: 0.1,
            lidar_density: 30.0,
            lidar_range_noise: 0.02,
            clutter_points: 300,
            camera_noise: 0.05,
            size_jitter: 0.08,
            max_attempts: 200,
        }
    }
}

impl SimConfig {
    pub fn validate(&self, layout: &SensorLayout) -> Result<()> {
        if self.min_objects > self.max_objects {
            return Err(Error::invalid("min_objects exceeds max_objects"));
        }
        if self.class_mix.iter().any(|p| !(*p >= 0.0)) || self.class_mix.iter().sum::<f64>() <= 0.0 {
            return Err(Error::invalid("class mix must be non-negative with positive total"));
        }
        if !(self.min_radius >= 0.0 && self.min_radius < self.max_radius) {
            return Err(Error::invalid("placement band must satisfy 0 <= min < max"));
        }
        let r = &layout.range;
        let reach = self.max_radius + 3.0;
        if reach > r.x.1.min(-r.x.0).min(r.y.1).min(-r.y.0) {
            return Err(Error::invalid("placement band exceeds the detection range"));
        }
        if self.lidar_density < 0.0 || self.camera_noise < 0.0 || self.lidar_range_noise < 0.0 {
            return Err(Error::invalid("noise levels and densities must be non-negative"));
        }
        Ok(())
    }
}

/// One generated sample. GT boxes and the world frame refer to the current
/// frame (index 0); LiDAR sweeps are stored in their own frame's ego
/// coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub id: u64,
    pub seed: u64,
    pub boxes: Vec<Box3D>,
    pub rig: CameraRig,
    pub points: Vec<Vec<LidarPoint>>,
    pub camera: CameraFeatureSet<f32>,
    pub lidar: LidarFeaturePyramid<f32>,
}

/// Independent stream for scene `id` under the master `seed`.
pub fn scene_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Ego pose of frame `t` (`t` frames in the past) for constant speed and yaw
/// rate, expressed in the current ego frame.
pub fn ego_pose(t: usize, dt: f64, speed: f64, yaw_rate: f64) -> Rigid3 {
    let tau = t as f64 * dt;
    let w = yaw_rate;
    // Integrate backwards in time along a circular arc.
    let (x, y) = if w.abs() < 1e-9 {
        (-speed * tau, 0.0)
    } else {
        (-speed * (w * tau).sin() / w, speed * ((w * tau).cos() - 1.0) / w)
    };
    Rigid3::from_yaw(-w * tau, [x, y, 0.0])
}

/// World (current-frame) center of `b` at frame `t` under constant velocity.
pub fn center_at(b: &Box3D, t: usize, dt: f64) -> [f64; 3] {
    let tau = t as f64 * dt;
    [
        b.center[0] - b.velocity[0] * tau,
        b.center[1] - b.velocity[1] * tau,
        b.center[2],
    ]
}

fn draw_class(rng: &mut ChaCha8Rng, mix: &[f64; NUM_CLASSES]) -> usize {
    let total: f64 = mix.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &p) in mix.iter().enumerate() {
        if u < p {
            return i;
        }
        u -= p;
    }
    NUM_CLASSES - 1
}

fn place_objects(cfg: &SimConfig, layout: &SensorLayout, rng: &mut ChaCha8Rng) -> Result<Vec<Box3D>> {
    let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let jitter = Normal::new(0.0, cfg.size_jitter.max(1e-12)).expect("valid normal");
    let mut boxes: Vec<Box3D> = Vec::with_capacity(n);
    for _ in 0..n {
        let class_id = draw_class(rng, &cfg.class_mix);
        let class = &CLASSES[class_id];
        let mut placed = false;
        for _ in 0..cfg.max_attempts {
            let size = class
                .size
                .map(|s| s * (1.0 + jitter.sample(rng)).clamp(0.7, 1.3));
            let r = rng.random_range(cfg.min_radius..cfg.max_radius);
            let theta = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let speed = if class.max_speed > 0.0 && rng.random::<f64>() < 0.5 {
                rng.random_range(0.0..class.max_speed)
            } else {
                0.0
            };
            let b = Box3D::new([r * theta.cos(), r * theta.sin(), size[2] / 2.0], size, yaw)
                .with_class(class_id)
                .with_velocity([speed * yaw.cos(), speed * yaw.sin()]);
            // Keep a safety margin so objects never touch in BEV.
            let mut grown = b.clone();
            grown.size = [size[0] + 0.5, size[1] + 0.5, size[2]];
            let clear = boxes.iter().all(|o| {
                let mut og = o.clone();
                og.size = [o.size[0] + 0.5, o.size[1] + 0.5, o.size[2]];
                bev_rotated_iou(&grown, &og) == 0.0
            });
            if clear && layout.range.contains(b.center) {
                boxes.push(b);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Placement(cfg.max_attempts));
        }
    }
    Ok(boxes)
}

/// Builds the rig for one scene from the sensor layout and sampled ego motion.
pub fn build_rig(layout: &SensorLayout, speed: f64, yaw_rate: f64) -> Result<CameraRig> {
    let poses = (0..layout.num_frames)
        .map(|t| ego_pose(t, layout.frame_dt, speed, yaw_rate))
        .collect();
    CameraRig::surround(
        layout.num_views,
        layout.hfov_deg,
        layout.image_size,
        layout.mount_height,
        poses,
    )
}

/// Generates scene `id`; a pure function of `(layout, cfg, seed, id)`.
pub fn generate_scene(layout: &SensorLayout, cfg: &SimConfig, seed: u64, id: u64) -> Result<SceneSample> {
    layout.validate()?;
    cfg.validate(layout)?;
    let mut rng = scene_rng(seed, id);
    let speed = cfg.ego_speed * rng.random_range(0.5..1.0);
    let yaw_rate = if cfg.max_yaw_rate > 0.0 {
        rng.random_range(-cfg.max_yaw_rate..cfg.max_yaw_rate)
    } else {
        0.0
    };
    let rig = build_rig(layout, speed, yaw_rate)?;
    let boxes = place_objects(cfg, layout, &mut rng)?;
    let points: Vec<Vec<LidarPoint>> = (0..layout.num_frames)
        .map(|t| lidar_points(&boxes, &rig, t, layout, cfg, &mut rng))
        .collect();
    let lidar = lidar_bev_features(&points[0], layout)?;
    let camera = camera_features(&boxes, &rig, layout, cfg.camera_noise, &mut rng)?;
    Ok(SceneSample {
        id,
        seed,
        boxes,
        rig,
        points,
        camera,
        lidar,
    })
}

/// Generates scenes `0..count` in parallel; output order is by id.
pub fn generate_dataset(layout: &SensorLayout, cfg: &SimConfig, seed: u64, count: usize) -> Result<Vec<SceneSample>> {
    use rayon::prelude::*;
    (0..count as u64)
        .into_par_iter()
        .map(|id| generate_scene(layout, cfg, seed, id))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let layout = SensorLayout::default();
        let cfg = SimConfig::default();
        let a = generate_scene(&layout, &cfg, 7, 3).unwrap();
        let b = generate_scene(&layout, &cfg, 7, 3).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&layout, &cfg, 7, 4).unwrap();
        assert_ne!(a.boxes, c.boxes);
    }

    #[test]
    fn empty_scene_is_valid() {
        let layout = SensorLayout::default();
        let cfg = SimConfig {
            min_objects: 0,
            max_objects: 0,
            ..SimConfig::default()
        };
        let s = generate_scene(&layout, &cfg, 1, 0).unwrap();
        assert!(s.boxes.is_empty());
        assert!(s.points[0].iter().all(|p| p.object < 0));
        assert!(s.camera.maps().iter().all(|m| m.data.is_finite()));
    }

    #[test]
    fn boxes_do_not_overlap_and_stay_in_range() {
        let layout = SensorLayout::default();
        let cfg = SimConfig::default();
        for id in 0..20 {
            let s = generate_scene(&layout, &cfg, 11, id).unwrap();
            for (i, a) in s.boxes.iter().enumerate() {
                assert!(layout.range.contains(a.center));
                for b in &s.boxes[i + 1..] {
                    assert_eq!(bev_rotated_iou(a, b), 0.0);
                }
            }
        }
    }

    #[test]
    fn ego_pose_straight_line() {
        let p = ego_pose(2, 0.5, 4.0, 0.0);
        assert!((p.translation[0] + 4.0).abs() < 1e-12);
        assert!(p.is_rigid(1e-12));
    }
}
