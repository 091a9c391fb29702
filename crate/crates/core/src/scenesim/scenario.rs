use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{lidar_bev_features, scene_rng, SceneSample, SensorLayout};
use crate::error::{Error, Result};

/// Which sensor delivers stale data in the stuck scenario.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StuckSensor {
    #[default]
    Camera,
    Lidar,
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScenarioKind {
    Clean,
    /// LiDAR keeps only returns within `angle_deg / 2` of the forward axis.
    FovLimited { angle_deg: f64 },
    /// On a `frame_rate` fraction of samples, each object loses all LiDAR
    /// returns with probability `object_rate`.
    ObjectFailure { frame_rate: f64, object_rate: f64 },
    /// The front camera (view 0) delivers all-zero features.
    FrontOcclusion,
    /// On a `frame_rate` fraction of samples the sensor delivers the previous
    /// timestamp's data in place of every frame.
    Stuck { frame_rate: f64, sensor: StuckSensor },
}

/// A scenario plus the seed of its random selections.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub seed: u64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            kind: ScenarioKind::Clean,
            seed: 0,
        }
    }
}

const SCENARIO_STREAM_SALT: u64 = 0x5ca1_ab1e;

impl ScenarioSpec {
    pub fn new(kind: ScenarioKind, seed: u64) -> Self {
        Self { kind, seed }
    }

    /// Scenario presets by name: `clean`, `fov120`, `fov180`,
    /// `object_failure`, `front_occlusion`, `stuck`.
    pub fn named(name: &str, seed: u64) -> Result<Self> {
        let kind = match name {
            "clean" => ScenarioKind::Clean,
            "fov120" => ScenarioKind::FovLimited { angle_deg: 120.0 },
            "fov180" => ScenarioKind::FovLimited { angle_deg: 180.0 },
            "object_failure" => ScenarioKind::ObjectFailure {
                frame_rate: 0.5,
                object_rate: 0.5,
            },
            "front_occlusion" => ScenarioKind::FrontOcclusion,
            "stuck" => ScenarioKind::Stuck {
                frame_rate: 0.5,
                sensor: StuckSensor::Camera,
            },
            other => return Err(Error::invalid(format!("unknown scenario `{}`", other))),
        };
        Ok(Self::new(kind, seed))
    }

    pub const PRESETS: [&'static str; 6] = ["clean", "fov120", "fov180", "object_failure", "front_occlusion", "stuck"];

    pub fn name(&self) -> String {
        match &self.kind {
            ScenarioKind::Clean => "clean".into(),
            ScenarioKind::FovLimited { angle_deg } => format!("fov{}", angle_deg),
            ScenarioKind::ObjectFailure { .. } => "object_failure".into(),
            ScenarioKind::FrontOcclusion => "front_occlusion".into(),
            ScenarioKind::Stuck { .. } => "stuck".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rate = |r: f64| (0.0..=1.0).contains(&r);
        match self.kind {
            ScenarioKind::FovLimited { angle_deg } if !(angle_deg > 0.0 && angle_deg <= 360.0) => {
                Err(Error::invalid("fov angle must be in (0, 360]"))
            }
            ScenarioKind::ObjectFailure {
                frame_rate,
                object_rate,
            } if !(rate(frame_rate) && rate(object_rate)) => Err(Error::invalid("rates must lie in [0, 1]")),
            ScenarioKind::Stuck { frame_rate, .. } if !rate(frame_rate) => {
                Err(Error::invalid("rates must lie in [0, 1]"))
            }
            _ => Ok(()),
        }
    }

    /// Objects of scene `scene_id` (out of `num_objects`) whose LiDAR returns
    /// are removed by an object-failure scenario.
    pub fn failed_objects(&self, scene_id: u64, num_objects: usize) -> Vec<bool> {
        match self.kind {
            ScenarioKind::ObjectFailure {
                frame_rate,
                object_rate,
            } => {
                let mut rng = scene_rng(self.seed ^ SCENARIO_STREAM_SALT, scene_id);
                let selected = rng.random::<f64>() < frame_rate;
                (0..num_objects)
                    .map(|_| {
                        let hit = rng.random::<f64>() < object_rate;
                        selected && hit
                    })
                    .collect()
            }
            _ => vec![false; num_objects],
        }
    }

    /// Whether a stuck scenario corrupts scene `scene_id`.
    pub fn is_stuck(&self, scene_id: u64) -> bool {
        match self.kind {
            ScenarioKind::Stuck { frame_rate, .. } => {
                let mut rng = scene_rng(self.seed ^ SCENARIO_STREAM_SALT, scene_id);
                rng.random::<f64>() < frame_rate
            }
            _ => false,
        }
    }
}

/// Whether a point survives a LiDAR field of view of `angle_deg` centered on
/// the forward axis.
pub fn fov_keeps(x: f64, y: f64, angle_deg: f64) -> bool {
    y.atan2(x).abs() <= angle_deg.to_radians() / 2.0
}

/// Corrupts the sensor data of `sample` according to `spec`. Ground-truth
/// boxes, the rig and the ego poses are never changed.
pub fn apply_scenario(sample: &SceneSample, spec: &ScenarioSpec, layout: &SensorLayout) -> Result<SceneSample> {
    spec.validate()?;
    let mut out = sample.clone();
    match spec.kind {
        ScenarioKind::Clean => {}
        ScenarioKind::FovLimited { angle_deg } => {
            for sweep in &mut out.points {
                sweep.retain(|p| fov_keeps(f64::from(p.pos[0]), f64::from(p.pos[1]), angle_deg));
            }
            out.lidar = lidar_bev_features(&out.points[0], layout)?;
        }
        ScenarioKind::ObjectFailure { .. } => {
            let failed = spec.failed_objects(sample.id, sample.boxes.len());
            if failed.iter().any(|f| *f) {
                for sweep in &mut out.points {
                    sweep.retain(|p| p.object < 0 || !failed[p.object as usize]);
                }
                out.lidar = lidar_bev_features(&out.points[0], layout)?;
            }
        }
        ScenarioKind::FrontOcclusion => {
            let cam = &mut out.camera;
            for m in 0..cam.num_scales {
                for t in 0..cam.num_frames {
                    cam.get_mut(0, m, t).data.data_mut().fill(0.0);
                }
            }
        }
        ScenarioKind::Stuck { sensor, .. } => {
            let frames = sample.rig.num_frames();
            if frames < 2 {
                return Err(Error::invalid("the stuck scenario needs at least two frames"));
            }
            if spec.is_stuck(sample.id) {
                if matches!(sensor, StuckSensor::Camera | StuckSensor::Both) {
                    let cam = &mut out.camera;
                    for v in 0..cam.num_views {
                        for m in 0..cam.num_scales {
                            for t in 0..frames - 1 {
                                let older = cam.get(v, m, t + 1).data.clone();
                                cam.get_mut(v, m, t).data = older;
                            }
                        }
                    }
                }
                if matches!(sensor, StuckSensor::Lidar | StuckSensor::Both) {
                    for t in 0..frames - 1 {
                        out.points[t] = out.points[t + 1].clone();
                    }
                    out.lidar = lidar_bev_features(&out.points[0], layout)?;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenesim::{generate_scene, SimConfig};

    #[test]
    fn fov_threshold() {
        assert!(!fov_keeps(70f64.to_radians().cos(), 70f64.to_radians().sin(), 120.0));
        assert!(fov_keeps(50f64.to_radians().cos(), 50f64.to_radians().sin(), 120.0));
        assert!(fov_keeps(-1.0, 0.0, 360.0));
    }

    #[test]
    fn named_presets_parse() {
        for name in ScenarioSpec::PRESETS {
            let spec = ScenarioSpec::named(name, 0).unwrap();
            assert!(spec.validate().is_ok());
            assert_eq!(spec.name(), name);
        }
        assert!(ScenarioSpec::named("fog", 0).is_err());
    }

    #[test]
    fn front_occlusion_and_fov_are_idempotent() {
        let layout = SensorLayout::default();
        let scene = generate_scene(&layout, &SimConfig::default(), 3, 1).unwrap();
        for name in ["front_occlusion", "fov120"] {
            let spec = ScenarioSpec::named(name, 9).unwrap();
            let once = apply_scenario(&scene, &spec, &layout).unwrap();
            let twice = apply_scenario(&once, &spec, &layout).unwrap();
            assert_eq!(once, twice);
            assert_eq!(once.boxes, scene.boxes);
        }
    }

    #[test]
    fn stuck_requires_two_frames() {
        let layout = SensorLayout {
            num_frames: 1,
            ..SensorLayout::default()
        };
        let scene = generate_scene(&layout, &SimConfig::default(), 3, 1).unwrap();
        let spec = ScenarioSpec::named("stuck", 0).unwrap();
        assert!(apply_scenario(&scene, &spec, &layout).is_err());
    }
}
