//! The layered query decoder: sampling, mixing, uncertainty-aware fusion and
//! residual box/class heads, plus matching, losses and training.

mod loss;
mod matching;
mod train;

pub use loss::{
    compute_loss, compute_loss_with_targets, focal_loss, loss_targets, match_layer, LayerTargets, LossBreakdown, LossConfig,
};
pub use matching::{assignment_cost, hungarian};
pub use train::{
    load_decoder, save_decoder, train, CheckpointMeta, TrainConfig, TrainLogLine, TrainState,
};

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featuremaps::{CameraFeatureSet, LidarFeaturePyramid};
use crate::geometry::{Box3D, CameraRig, DetectionRange};
use crate::paqg::{detector_rng, generate_queries, PaqgConfig, Query, QueryOrigin};
use crate::params::{Bound, ParamStore};
use crate::rias::{
    adaptive_mix, init_rias, predict_camera_pattern, predict_lidar_pattern, sample_camera, sample_lidar,
    RiasConfig,
};
use crate::scenesim::{SensorLayout, NUM_CLASSES};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};
use crate::uaf::{
    distance_to_uncertainty, fuse, init_uaf, oracle_distance, pool_roi, predict_distance, regress_xy,
    uncertainty_column, uncertainty_from_distance, FusionMode, UncertaintyPair,
};

/// Length of the box parameter vector.
pub const BOX_PARAMS: usize = 10;
/// Oracle distances are capped here (also used when no ground truth exists).
pub const ORACLE_DISTANCE_CAP: f64 = 10.0;
/// Initial classification bias, `-ln((1 - 0.01) / 0.01)`.
pub const CLASS_PRIOR_BIAS: f64 = -4.595_119_850_134_59;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: usize,
    /// Sampling points per group (K).
    pub points: usize,
    pub offset_factor: f64,
    pub head_hidden: usize,
    /// Meters per unit of the center entries of the box parameter vector.
    pub center_scale: f64,
    /// Meters per second per unit of the velocity entries.
    pub velocity_scale: f64,
    pub fusion: FusionMode,
    pub oracle_uncertainty: bool,
    pub queries: PaqgConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            points: 4,
            offset_factor: 2.0,
            head_hidden: 64,
            center_scale: 1.0,
            velocity_scale: 1.0,
            fusion: FusionMode::Uaf,
            oracle_uncertainty: false,
            queries: PaqgConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.points == 0 || self.head_hidden == 0 {
            return Err(Error::invalid("layers, points and head width must be positive"));
        }
        if !(self.center_scale > 0.0 && self.velocity_scale > 0.0) {
            return Err(Error::invalid("box parameter scales must be positive"));
        }
        if !(self.offset_factor > 0.5) {
            return Err(Error::invalid("offset factor must exceed 0.5"));
        }
        self.queries.validate()
    }
}

/// Box parameter vector `[x, y, z, ln l, ln w, ln h, sin yaw, cos yaw, vx,
/// vy]` with centers and velocities divided by their scales.
pub fn box_to_params(b: &Box3D, center_scale: f64, velocity_scale: f64) -> [f64; BOX_PARAMS] {
    let (s, c) = b.yaw.sin_cos();
    [
        b.center[0] / center_scale,
        b.center[1] / center_scale,
        b.center[2] / center_scale,
        b.size[0].ln(),
        b.size[1].ln(),
        b.size[2].ln(),
        s,
        c,
        b.velocity[0] / velocity_scale,
        b.velocity[1] / velocity_scale,
    ]
}

/// Inverse of [`box_to_params`]; class and score are left at defaults.
pub fn params_to_box(p: &[f64], center_scale: f64, velocity_scale: f64) -> Box3D {
    Box3D::new(
        [p[0] * center_scale, p[1] * center_scale, p[2] * center_scale],
        [p[3].exp(), p[4].exp(), p[5].exp()],
        p[6].atan2(p[7]),
    )
    .with_velocity([p[8] * velocity_scale, p[9] * velocity_scale])
}

/// Applies a residual `delta` to `b` in parameter space.
pub fn refine_box(delta: &[f64], b: &Box3D, center_scale: f64, velocity_scale: f64) -> Box3D {
    let mut p = box_to_params(b, center_scale, velocity_scale);
    for (v, d) in p.iter_mut().zip(delta) {
        *v += d;
    }
    params_to_box(&p, center_scale, velocity_scale)
        .with_class(b.class_id)
        .with_score(b.score)
}

/// Refined box parameters `[N, 10]` on the tape: the constant parameters of
/// `boxes` plus the two-layer head `prefix` applied to `feature [N, C]`.
pub fn refine_params<T: Real>(
    tape: &mut Tape<T>,
    params: &Bound,
    prefix: &str,
    feature: Var,
    boxes: &[Box3D],
    center_scale: f64,
    velocity_scale: f64,
) -> Result<Var> {
    let base = Tensor::from_fn(&[boxes.len(), BOX_PARAMS], |i| {
        T::lit(box_to_params(&boxes[i / BOX_PARAMS], center_scale, velocity_scale)[i % BOX_PARAMS])
    });
    let base = tape.constant(base);
    let delta = params.mlp2(tape, prefix, feature)?;
    tape.add(base, delta)
}

/// Feature maps of one sample bound onto a tape as constants.
#[derive(Clone, Debug)]
pub struct SceneVars {
    pub camera: Vec<Var>,
    pub lidar: Vec<Var>,
}

pub fn bind_scene<T: Real>(
    tape: &mut Tape<T>,
    camera: &CameraFeatureSet<T>,
    lidar: &LidarFeaturePyramid<T>,
) -> SceneVars {
    SceneVars {
        camera: camera.maps().iter().map(|m| tape.constant(m.data.clone())).collect(),
        lidar: lidar.maps.iter().map(|m| tape.constant(m.data.clone())).collect(),
    }
}

/// Where fusion uncertainties come from.
#[derive(Clone, Copy, Debug)]
pub enum UncertaintySource<'a> {
    /// The learned distance predictors (detached).
    Predicted,
    /// Distances of the regressed centers to the nearest ground-truth box.
    Oracle(&'a [Box3D]),
}

/// One decoder layer's outputs on the tape.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    /// Boxes the layer sampled around (its input).
    pub input_boxes: Vec<Box3D>,
    pub logits: Var,
    /// Refined box parameters `[N, 10]`.
    pub box_params: Var,
    pub dist_cam: Var,
    pub dist_lid: Var,
    /// Regressed BEV center residuals `[N, 2]` in meters.
    pub reg_cam: Var,
    pub reg_lid: Var,
    pub boxes: Vec<Box3D>,
    pub scores: Vec<[f64; NUM_CLASSES]>,
    /// Predicted uncertainties.
    pub uncertainties: Vec<UncertaintyPair>,
    /// Uncertainties the fusion actually used.
    pub fusion_uncertainties: Vec<UncertaintyPair>,
}

/// Per-layer result without tape handles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerPrediction {
    pub scores: Vec<[f64; NUM_CLASSES]>,
    pub boxes: Vec<Box3D>,
    pub uncertainties: Vec<UncertaintyPair>,
}

impl LayerPrediction {
    /// Boxes labelled with their arg-max class and its score.
    pub fn detections(&self) -> Vec<Box3D> {
        self.boxes
            .iter()
            .zip(&self.scores)
            .map(|(b, s)| {
                let (c, p) = s
                    .iter()
                    .enumerate()
                    .fold((0, f64::MIN), |acc, (i, &p)| if p > acc.1 { (i, p) } else { acc });
                b.clone().with_class(c).with_score(p)
            })
            .collect()
    }
}

/// Nearest ground-truth BEV distance from each predicted xy, capped.
fn oracle_column(centers: &[Box3D], reg: &Tensor<impl Real>, gt: &[Box3D]) -> Vec<f64> {
    centers
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let xy = [
                b.center[0] + reg.data()[2 * i].to_f64_lossy(),
                b.center[1] + reg.data()[2 * i + 1].to_f64_lossy(),
            ];
            gt.iter()
                .map(|g| oracle_distance(xy, [g.center[0], g.center[1]]))
                .fold(ORACLE_DISTANCE_CAP, f64::min)
        })
        .map(|d| uncertainty_from_distance(d).expect("distance is nonnegative"))
        .collect()
}

/// Width of the per-query box encoding.
pub const BOX_ENCODING: usize = 11;

/// Box encoding `[N, 11]` added to the query before each layer: center over
/// the range half extents, ground distance over the x half extent, log
/// sizes, yaw as (sin, cos) and velocity.
pub fn box_encoding<T: Real>(boxes: &[Box3D], range: &DetectionRange) -> Tensor<T> {
    let rows: Vec<[f64; BOX_ENCODING]> = boxes.iter().map(|b| box_encoding_row(b, range)).collect();
    Tensor::from_fn(&[boxes.len(), BOX_ENCODING], |i| T::lit(rows[i / BOX_ENCODING][i % BOX_ENCODING]))
}

/// One row of [`box_encoding`].
pub fn box_encoding_row(b: &Box3D, range: &DetectionRange) -> [f64; BOX_ENCODING] {
    let hx = 0.5 * (range.x.1 - range.x.0);
    let hy = 0.5 * (range.y.1 - range.y.0);
    let hz = 0.5 * (range.z.1 - range.z.0);
    [
        b.center[0] / hx,
        b.center[1] / hy,
        b.center[2] / hz,
        b.center[0].hypot(b.center[1]) / hx,
        b.size[0].ln(),
        b.size[1].ln(),
        b.size[2].ln(),
        b.yaw.sin(),
        b.yaw.cos(),
        b.velocity[0],
        b.velocity[1],
    ]
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Decoder parameters together with the shapes they were built for.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder<T> {
    pub model: ModelConfig,
    pub layout: SensorLayout,
    pub params: ParamStore<T>,
}

impl<T: Real> Decoder<T> {
    pub fn new(model: ModelConfig, layout: SensorLayout, seed: u64) -> Result<Self> {
        model.validate()?;
        layout.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let c = layout.channels;
        let h = model.head_hidden;
        params.init_vector("query.embedding", c, 0.1, &mut rng);
        let rc = Self::rias_config_for(&model, &layout);
        for l in 0..model.layers {
            let p = format!("layer{}", l);
            init_rias(&mut params, &p, &rc, &mut rng);
            init_uaf(&mut params, &format!("{}.uaf", p), c, &mut rng);
            params.init_linear(&format!("{}.pos.0", p), BOX_ENCODING, h, 2f64.sqrt(), &mut rng);
            params.init_linear(&format!("{}.pos.1", p), h, c, 0.5, &mut rng);
            params.init_layer_norm(&format!("{}.query_ln", p), c);
            params.init_linear(&format!("{}.box.0", p), c, h, 2f64.sqrt(), &mut rng);
            params.init_zero_linear(&format!("{}.box.1", p), h, BOX_PARAMS);
            params.init_linear(&format!("{}.cls.0", p), c, h, 2f64.sqrt(), &mut rng);
            params.init_linear(&format!("{}.cls.1", p), h, NUM_CLASSES, 0.1, &mut rng);
            params.insert(
                format!("{}.cls.1.b", p),
                Tensor::full(&[NUM_CLASSES], T::lit(CLASS_PRIOR_BIAS)),
            );
        }
        Ok(Self { model, layout, params })
    }

    fn rias_config_for(model: &ModelConfig, layout: &SensorLayout) -> RiasConfig {
        RiasConfig {
            channels: layout.channels,
            points: model.points,
            lidar_scales: layout.lidar_scales,
            camera_scales: layout.camera_strides.len(),
            frames: layout.num_frames,
            offset_factor: model.offset_factor,
        }
    }

    pub fn rias_config(&self) -> RiasConfig {
        Self::rias_config_for(&self.model, &self.layout)
    }

    pub fn embedding(&self) -> Result<Vec<T>> {
        Ok(self.params.get("query.embedding")?.data().to_vec())
    }

    /// Query generation for scene `scene_id` with the current embedding.
    /// The proposals depend only on the detector seed and the scene.
    pub fn queries(&self, scene_id: u64, gt: &[Box3D], camera: &CameraFeatureSet<T>, rig: &CameraRig) -> Result<Vec<Query<T>>> {
        let mut rng = detector_rng(self.model.queries.detector_seed, scene_id);
        generate_queries(gt, camera, rig, &self.layout.range, &self.model.queries, &self.embedding()?, &mut rng)
    }

    /// Initial query features `[N, C]`: proposal features as constants, the
    /// learned embedding elsewhere.
    fn stack_queries(&self, tape: &mut Tape<T>, params: &Bound, queries: &[Query<T>]) -> Result<Var> {
        let (n, c) = (queries.len(), self.layout.channels);
        let learned = |q: &Query<T>| q.origin != QueryOrigin::Proposal;
        if let Some(q) = queries.iter().find(|q| q.feature.len() != c) {
            return Err(Error::shape(format!("query feature of width {} for C = {}", q.feature.len(), c)));
        }
        let fixed = Tensor::from_fn(&[n, c], |i| {
            let q = &queries[i / c];
            if learned(q) {
                T::zero()
            } else {
                q.feature[i % c]
            }
        });
        let mask = Tensor::from_fn(&[n, 1], |i| if learned(&queries[i]) { T::one() } else { T::zero() });
        let fixed = tape.constant(fixed);
        let mask = tape.constant(mask);
        let emb = params.get("query.embedding")?;
        let emb = tape.reshape(emb, &[1, c])?;
        let learned = tape.mul(mask, emb)?;
        tape.add(fixed, learned)
    }

    /// Runs all layers on the tape.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        params: &Bound,
        queries: &[Query<T>],
        scene: &SceneVars,
        rig: &CameraRig,
        source: UncertaintySource<'_>,
    ) -> Result<Vec<LayerTrace>> {
        if queries.len() != self.model.queries.num_queries {
            return Err(Error::shape(format!(
                "{} queries for N_q = {}",
                queries.len(),
                self.model.queries.num_queries
            )));
        }
        let rc = self.rias_config();
        let n = queries.len();
        let (cs, vs) = (self.model.center_scale, self.model.velocity_scale);
        let mut q = self.stack_queries(tape, params, queries)?;
        let mut boxes: Vec<Box3D> = queries.iter().map(|q| q.bbox.clone()).collect();
        let mut out = Vec::with_capacity(self.model.layers);
        for l in 0..self.model.layers {
            let p = format!("layer{}", l);
            let xy = tape.constant(Tensor::from_fn(&[n, 2], |i| T::lit(boxes[i / 2].center[i % 2])));
            let xyz = tape.constant(Tensor::from_fn(&[n, 3], |i| T::lit(boxes[i / 3].center[i % 3])));

            let enc = tape.constant(box_encoding(&boxes, &self.layout.range));
            let pos = params.mlp2(tape, &format!("{}.pos", p), enc)?;
            q = tape.add(q, pos)?;

            let lp = predict_lidar_pattern(tape, params, &format!("{}.lid", p), q, &boxes, &rc)?;
            let f_lid = sample_lidar(tape, xy, &lp, &scene.lidar, &self.layout.range, &rc)?;
            let cp = predict_camera_pattern(tape, params, &format!("{}.cam", p), q, &boxes, &rc)?;
            let f_cam = sample_camera(tape, xyz, &cp, &scene.camera, rig, &self.layout.camera_strides, &rc)?;
            let m_lid = adaptive_mix(tape, params, &format!("{}.lid.mix", p), q, f_lid)?;
            let m_cam = adaptive_mix(tape, params, &format!("{}.cam.mix", p), q, f_cam)?;

            let pool_lid = pool_roi(tape, f_lid)?;
            let pool_cam = pool_roi(tape, f_cam)?;
            let dist_lid = predict_distance(tape, params, &format!("{}.uaf.dist_lid", p), pool_lid)?;
            let dist_cam = predict_distance(tape, params, &format!("{}.uaf.dist_cam", p), pool_cam)?;
            let reg_lid = regress_xy(tape, params, &format!("{}.uaf.reg_lid", p), pool_lid)?;
            let reg_cam = regress_xy(tape, params, &format!("{}.uaf.reg_cam", p), pool_cam)?;

            let to_u = |d: &Tensor<T>| -> Vec<f64> {
                d.data()
                    .iter()
                    .map(|v| -(-v.to_f64_lossy()).exp_m1())
                    .collect()
            };
            let u_pred_cam = to_u(tape.value(dist_cam));
            let u_pred_lid = to_u(tape.value(dist_lid));
            let uncertainties: Vec<UncertaintyPair> = u_pred_cam
                .iter()
                .zip(&u_pred_lid)
                .map(|(&u_cam, &u_lid)| UncertaintyPair { u_cam, u_lid })
                .collect();
            let (u_cam, u_lid, used) = match (self.model.fusion, source) {
                (FusionMode::Equal, _) => {
                    let z = uncertainty_column(tape, &vec![0.0; n]);
                    (z, z, vec![UncertaintyPair::default(); n])
                }
                (FusionMode::Uaf, UncertaintySource::Predicted) => {
                    let dc = tape.detach(dist_cam);
                    let dl = tape.detach(dist_lid);
                    let uc = distance_to_uncertainty(tape, dc)?;
                    let ul = distance_to_uncertainty(tape, dl)?;
                    (uc, ul, uncertainties.clone())
                }
                (FusionMode::Uaf, UncertaintySource::Oracle(gt)) => {
                    let oc = oracle_column(&boxes, tape.value(reg_cam), gt);
                    let ol = oracle_column(&boxes, tape.value(reg_lid), gt);
                    let used = oc
                        .iter()
                        .zip(&ol)
                        .map(|(&u_cam, &u_lid)| UncertaintyPair { u_cam, u_lid })
                        .collect();
                    (uncertainty_column(tape, &oc), uncertainty_column(tape, &ol), used)
                }
            };
            let fused = fuse(tape, params, &format!("{}.uaf.fuse", p), m_cam, u_cam, m_lid, u_lid)?;
            let res = tape.add(q, fused)?;
            let q_next = params.layer_norm(tape, &format!("{}.query_ln", p), res)?;

            let box_params = refine_params(tape, params, &format!("{}.box", p), q_next, &boxes, cs, vs)?;
            let logits = params.mlp2(tape, &format!("{}.cls", p), q_next)?;

            let lv = tape.value(logits).data();
            let scores: Vec<[f64; NUM_CLASSES]> = (0..n)
                .map(|i| std::array::from_fn(|c| sigmoid(lv[i * NUM_CLASSES + c].to_f64_lossy())))
                .collect();
            let bv = tape.value(box_params).data();
            let delta_free: Vec<Box3D> = (0..n)
                .map(|i| {
                    // Rebuild from the base box in f64 so that a zero residual is exact.
                    let base = box_to_params(&boxes[i], cs, vs);
                    let delta: Vec<f64> = (0..BOX_PARAMS)
                        .map(|d| bv[i * BOX_PARAMS + d].to_f64_lossy() - T::lit(base[d]).to_f64_lossy())
                        .collect();
                    refine_box(&delta, &boxes[i], cs, vs)
                })
                .collect();
            let new_boxes: Vec<Box3D> = delta_free
                .into_iter()
                .zip(&scores)
                .map(|(b, s)| {
                    let (c, p) = s
                        .iter()
                        .enumerate()
                        .fold((0, f64::MIN), |acc, (i, &p)| if p > acc.1 { (i, p) } else { acc });
                    b.with_class(c).with_score(p)
                })
                .collect();
            out.push(LayerTrace {
                input_boxes: boxes,
                logits,
                box_params,
                dist_cam,
                dist_lid,
                reg_cam,
                reg_lid,
                boxes: new_boxes.clone(),
                scores,
                uncertainties,
                fusion_uncertainties: used,
            });
            boxes = new_boxes;
            q = q_next;
        }
        Ok(out)
    }

    /// Forward pass without gradients.
    pub fn predict(
        &self,
        camera: &CameraFeatureSet<T>,
        lidar: &LidarFeaturePyramid<T>,
        rig: &CameraRig,
        queries: &[Query<T>],
        source: UncertaintySource<'_>,
    ) -> Result<Vec<LayerPrediction>> {
        let mut tape = Tape::new();
        let params = self.params.bind(&mut tape, false);
        let scene = bind_scene(&mut tape, camera, lidar);
        let traces = self.forward(&mut tape, &params, queries, &scene, rig, source)?;
        Ok(traces
            .into_iter()
            .map(|t| LayerPrediction {
                scores: t.scores,
                boxes: t.boxes,
                uncertainties: t.uncertainties,
            })
            .collect())
    }

    pub fn cast<U: Real>(&self) -> Decoder<U> {
        Decoder {
            model: self.model.clone(),
            layout: self.layout.clone(),
            params: self.params.cast(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_params_round_trip() {
        let b = Box3D::new([3.0, -4.0, 0.5], [4.5, 1.9, 1.6], 2.5).with_velocity([1.0, -0.5]);
        let back = params_to_box(&box_to_params(&b, 1.0, 1.0), 1.0, 1.0);
        assert!((back.yaw - b.yaw).abs() < 1e-12);
        for k in 0..3 {
            assert!((back.size[k] - b.size[k]).abs() < 1e-12);
        }
        let mut d = [0.0; BOX_PARAMS];
        d[3] = 2f64.ln();
        let r = refine_box(&d, &b, 1.0, 1.0);
        assert!((r.size[0] - 9.0).abs() < 1e-12);
        assert_eq!(refine_box(&[0.0; BOX_PARAMS], &b, 1.0, 1.0).center, b.center);
    }
}
