//! Perspective-aware query generation: perspective proposals from a noisy
//! oracle, lifting to 3D, cross-view NMS with top-k selection, camera feature
//! initialization, and uniformly random extra queries.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featuremaps::{sample_view_scale_mean, CameraFeatureSet};
use crate::geometry::{hit_views, nms_3d, project_to_view, unproject_center, Box3D, CameraRig, DetectionRange};
use crate::scenesim::{scene_rng, CLASSES, NUM_CLASSES};
use crate::tensor::Real;

/// A 2D center with depth and raw 3D attributes predicted in one view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerspectiveProposal {
    pub view: usize,
    pub center_px: (f64, f64),
    pub depth: f64,
    pub size: [f64; 3],
    pub yaw: f64,
    pub velocity: [f64; 2],
    pub score: f64,
    pub class_id: usize,
}

/// Noise model of the perspective oracle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleNoise {
    pub pixel_sigma: f64,
    /// Standard deviation of the log-depth error.
    pub depth_sigma: f64,
    pub size_sigma: f64,
    pub yaw_sigma: f64,
    pub velocity_sigma: f64,
    pub miss_rate: f64,
    /// Mean number of false positives per view.
    pub false_positive_rate: f64,
    /// Score drop per `score_scale` pixels of center error.
    pub score_lambda: f64,
    pub score_scale: f64,
}

impl Default for OracleNoise {
    fn default() -> Self {
        Self {
            pixel_sigma: 1.0,
            depth_sigma: 0.03,
            size_sigma: 0.05,
            yaw_sigma: 0.1,
            velocity_sigma: 0.2,
            miss_rate: 0.0,
            false_positive_rate: 1.0,
            score_lambda: 1.0,
            score_scale: 10.0,
        }
    }
}

impl OracleNoise {
    pub fn noiseless() -> Self {
        Self {
            pixel_sigma: 0.0,
            depth_sigma: 0.0,
            size_sigma: 0.0,
            yaw_sigma: 0.0,
            velocity_sigma: 0.0,
            miss_rate: 0.0,
            false_positive_rate: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sigmas = [
            self.pixel_sigma,
            self.depth_sigma,
            self.size_sigma,
            self.yaw_sigma,
            self.velocity_sigma,
            self.false_positive_rate,
        ];
        if sigmas.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::invalid("oracle noise levels must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.miss_rate) {
            return Err(Error::invalid("oracle miss rate must lie in [0, 1]"));
        }
        if !(self.score_scale > 0.0) {
            return Err(Error::invalid("oracle score scale must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PaqgConfig {
    /// Total queries `N_q = N_k + N_r`.
    pub num_queries: usize,
    /// Proposal-seeded queries `N_k`.
    pub num_proposals: usize,
    pub nms_iou: f64,
    pub oracle: OracleNoise,
    /// Seed of the simulated perspective detector. Its proposals are a fixed
    /// function of this seed and the scene id.
    pub detector_seed: u64,
}

impl Default for PaqgConfig {
    fn default() -> Self {
        Self {
            num_queries: 60,
            num_proposals: 20,
            nms_iou: 0.5,
            oracle: OracleNoise::default(),
            detector_seed: 0,
        }
    }
}

impl PaqgConfig {
    /// Full-scale split: 900 queries of which 200 are proposal seeded.
    pub fn full_scale() -> Self {
        Self {
            num_queries: 900,
            num_proposals: 200,
            ..Self::default()
        }
    }

    pub fn num_random(&self) -> usize {
        self.num_queries - self.num_proposals
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_proposals > self.num_queries || self.num_queries == 0 {
            return Err(Error::invalid("need 0 <= N_k <= N_q and N_q >= 1"));
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::invalid("NMS threshold must lie in [0, 1]"));
        }
        self.oracle.validate()
    }
}

/// Where a query's initial box came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryOrigin {
    Proposal,
    Padding,
    Random,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Query<T> {
    pub feature: Vec<T>,
    pub bbox: Box3D,
    pub origin: QueryOrigin,
}

/// Simulated perspective detector. Every ground-truth object whose center is
/// visible in a view yields (unless missed) one proposal with noisy center,
/// depth, size, yaw and velocity; its score falls with the pixel error.
/// Poisson false positives with low scores are added per view.
pub fn perspective_oracle(
    gt: &[Box3D],
    rig: &CameraRig,
    noise: &OracleNoise,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<PerspectiveProposal>>> {
    noise.validate()?;
    let gauss = |s: f64| Normal::new(0.0, s.max(1e-300)).expect("valid normal");
    let (px_n, d_n, s_n, y_n, v_n) = (
        gauss(noise.pixel_sigma),
        gauss(noise.depth_sigma),
        gauss(noise.size_sigma),
        gauss(noise.yaw_sigma),
        gauss(noise.velocity_sigma),
    );
    let draw = |n: &Normal<f64>, sigma: f64, rng: &mut ChaCha8Rng| if sigma > 0.0 { n.sample(rng) } else { 0.0 };
    let mut out = Vec::with_capacity(rig.num_views());
    for (v, view) in rig.views.iter().enumerate() {
        let mut props = Vec::new();
        for b in gt {
            let Some((u, w, depth)) = project_to_view(b.center, view) else {
                continue;
            };
            if noise.miss_rate > 0.0 && rng.random::<f64>() < noise.miss_rate {
                continue;
            }
            let (nx, ny) = (
                draw(&px_n, noise.pixel_sigma, rng),
                draw(&px_n, noise.pixel_sigma, rng),
            );
            let dz = draw(&d_n, noise.depth_sigma, rng);
            let size = [0, 1, 2].map(|_| draw(&s_n, noise.size_sigma, rng).exp());
            let yaw = draw(&y_n, noise.yaw_sigma, rng);
            let vel = [draw(&v_n, noise.velocity_sigma, rng), draw(&v_n, noise.velocity_sigma, rng)];
            let err = nx.hypot(ny);
            props.push(PerspectiveProposal {
                view: v,
                center_px: (u + nx, w + ny),
                depth: depth * dz.exp(),
                size: [b.size[0] * size[0], b.size[1] * size[1], b.size[2] * size[2]],
                yaw: crate::geometry::normalize_yaw(b.yaw + yaw),
                velocity: [b.velocity[0] + vel[0], b.velocity[1] + vel[1]],
                score: (1.0 - noise.score_lambda * err / noise.score_scale).clamp(0.05, 1.0),
                class_id: b.class_id,
            });
        }
        if noise.false_positive_rate > 0.0 {
            let n = Poisson::new(noise.false_positive_rate).expect("positive rate").sample(rng) as usize;
            let (w, h) = (view.image_size.0 as f64, view.image_size.1 as f64);
            for _ in 0..n {
                let class_id = rng.random_range(0..NUM_CLASSES);
                props.push(PerspectiveProposal {
                    view: v,
                    center_px: (rng.random_range(0.0..w), rng.random_range(0.0..h)),
                    depth: rng.random_range(5.0..40.0),
                    size: CLASSES[class_id].size,
                    yaw: rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
                    velocity: [0.0; 2],
                    score: rng.random_range(0.05..0.3),
                    class_id,
                });
            }
        }
        out.push(props);
    }
    Ok(out)
}

/// Lifts proposals to world boxes by unprojecting their centers.
pub fn lift_proposals(proposals: &[PerspectiveProposal], rig: &CameraRig) -> Result<Vec<Box3D>> {
    proposals
        .iter()
        .map(|p| {
            let view = rig.views.get(p.view).ok_or(Error::MissingView(p.view))?;
            let center = unproject_center(p.center_px.0, p.center_px.1, p.depth, view)?;
            Ok(Box3D::new(center, p.size, p.yaw)
                .with_class(p.class_id)
                .with_score(p.score)
                .with_velocity(p.velocity))
        })
        .collect()
}

/// Size priors used for random queries, one per class.
pub fn class_size_priors() -> Vec<[f64; 3]> {
    CLASSES.iter().map(|c| c.size).collect()
}

/// `n` boxes with centers uniform in `range`, a uniformly chosen class size
/// prior, uniform yaw and zero velocity.
pub fn random_boxes(n: usize, range: &DetectionRange, priors: &[[f64; 3]], rng: &mut ChaCha8Rng) -> Vec<Box3D> {
    (0..n)
        .map(|_| {
            let center = [
                rng.random_range(range.x.0..range.x.1),
                rng.random_range(range.y.0..range.y.1),
                rng.random_range(range.z.0..range.z.1),
            ];
            let class_id = rng.random_range(0..priors.len());
            let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            Box3D::new(center, priors[class_id], yaw)
                .with_class(class_id)
                .with_score(0.0)
        })
        .collect()
}

/// Random queries carrying the learned default embedding.
pub fn random_queries<T: Real>(
    n: usize,
    range: &DetectionRange,
    rng: &mut ChaCha8Rng,
    priors: &[[f64; 3]],
    embedding: &[T],
) -> Vec<Query<T>> {
    random_boxes(n, range, priors, rng)
        .into_iter()
        .map(|bbox| Query {
            feature: embedding.to_vec(),
            bbox,
            origin: QueryOrigin::Random,
        })
        .collect()
}

/// Cross-view NMS followed by global top-`N_k` by score. When fewer than
/// `N_k` boxes survive, random boxes fill the remainder. The flag marks
/// padded entries.
pub fn select_topk(
    boxes: &[Box3D],
    cfg: &PaqgConfig,
    range: &DetectionRange,
    rng: &mut ChaCha8Rng,
) -> Vec<(Box3D, bool)> {
    let keep = nms_3d(boxes, cfg.nms_iou);
    let mut out: Vec<(Box3D, bool)> = keep
        .into_iter()
        .take(cfg.num_proposals)
        .map(|i| (boxes[i].clone(), false))
        .collect();
    let missing = cfg.num_proposals - out.len();
    out.extend(
        random_boxes(missing, range, &class_size_priors(), rng)
            .into_iter()
            .map(|b| (b, true)),
    );
    out
}

/// Initial query features: the mean over hit views of the scale-summed camera
/// samples at the (range-clamped) box center in the current frame, or the
/// default embedding when no view sees the center.
pub fn init_queries<T: Real>(
    boxes: &[Box3D],
    camera: &CameraFeatureSet<T>,
    rig: &CameraRig,
    range: &DetectionRange,
    embedding: &[T],
) -> Result<Vec<Query<T>>> {
    boxes
        .iter()
        .map(|b| {
            let mut bbox = b.clone();
            bbox.center = range.clamp(bbox.center);
            let hit = hit_views(bbox.center, rig, 0);
            let feature = if hit.is_empty() {
                embedding.to_vec()
            } else {
                sample_view_scale_mean(camera, bbox.center, rig, 0, &hit)?
            };
            Ok(Query {
                feature,
                bbox,
                origin: QueryOrigin::Proposal,
            })
        })
        .collect()
}

const DETECTOR_SALT: u64 = 0x9e37_79b9;

/// Random stream of the simulated detector for scene `scene_id`.
pub fn detector_rng(detector_seed: u64, scene_id: u64) -> ChaCha8Rng {
    scene_rng(detector_seed ^ DETECTOR_SALT, scene_id)
}

/// Full query set for one sample: oracle proposals, lifting, NMS + top-k,
/// feature initialization, and `N_r` random queries. Always returns `N_q`
/// queries.
pub fn generate_queries<T: Real>(
    gt: &[Box3D],
    camera: &CameraFeatureSet<T>,
    rig: &CameraRig,
    range: &DetectionRange,
    cfg: &PaqgConfig,
    embedding: &[T],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Query<T>>> {
    cfg.validate()?;
    let mut per_view = perspective_oracle(gt, rig, &cfg.oracle, rng)?;
    // A view that delivers no image produces no perspective detections.
    for (v, props) in per_view.iter_mut().enumerate() {
        if v < camera.num_views && (0..camera.num_scales).all(|m| camera.get(v, m, 0).is_zero()) {
            props.clear();
        }
    }
    let flat: Vec<PerspectiveProposal> = per_view.into_iter().flatten().collect();
    let lifted = lift_proposals(&flat, rig)?;
    let selected = select_topk(&lifted, cfg, range, rng);
    let (boxes, padded): (Vec<Box3D>, Vec<bool>) = selected.into_iter().unzip();
    let mut queries = init_queries(&boxes, camera, rig, range, embedding)?;
    for (q, pad) in queries.iter_mut().zip(padded) {
        if pad {
            q.origin = QueryOrigin::Padding;
            q.feature = embedding.to_vec();
        }
    }
    queries.extend(random_queries(cfg.num_random(), range, rng, &class_size_priors(), embedding));
    Ok(queries)
}
