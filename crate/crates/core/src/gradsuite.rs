//! Finite-difference checks of every differentiable building block on small
//! random instances. Shared by the `gradcheck` command and the tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::decoder::{
    compute_loss_with_targets, loss_targets, refine_params, LayerTrace, LossConfig, ModelConfig, BOX_PARAMS,
};
use crate::error::{Error, Result};
use crate::geometry::{Box3D, CameraRig, DetectionRange, Rigid3};
use crate::gradcheck::{grad_check_with, GradCheckOptions, GradCheckReport};
use crate::params::{Bound, ParamStore};
use crate::rias::{adaptive_mix, init_mix, sample_camera, sample_lidar, RiasConfig, SamplingPattern};
use crate::scenesim::NUM_CLASSES;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::uaf::{fuse, init_uaf, predict_uncertainty};

pub const OPS: [&str; 10] = [
    "bilinear_sample",
    "layer_norm",
    "softmax",
    "adaptive_mix",
    "sample_lidar",
    "sample_camera",
    "predict_uncertainty",
    "fuse",
    "refine_box",
    "compute_loss",
];

/// Worst case of one op over all seeds.
#[derive(Clone, Debug, Serialize)]
pub struct OpSummary {
    pub op: String,
    pub seeds: usize,
    pub max_rel_error: f64,
    pub worst_seed: u64,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn jitter(store: &mut ParamStore<f64>, scale: f64, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = store.names().cloned().collect();
    for name in names {
        let t = store.get_mut(&name).expect("listed parameter");
        for v in t.data_mut() {
            *v += rng.random_range(-scale..scale);
        }
    }
}

/// Multiplies `out` by fixed random weights so the checked scalar mixes all
/// entries unevenly.
fn project(tape: &mut Tape<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = tape.constant(weights.clone());
    tape.mul(out, w)
}

/// Runs a check whose closure also receives the parameters of `store` as
/// leaves, bound after the `data` inputs.
fn check_with_params<F>(store: &ParamStore<f64>, data: Vec<Tensor<f64>>, opts: GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var], &Bound) -> Result<Var>,
{
    let names: Vec<String> = store.names().cloned().collect();
    let nd = data.len();
    let mut inputs = data;
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    grad_check_with(
        |tape, vars| {
            let bound = Bound::from_vars(names.iter().cloned().zip(vars[nd..].iter().copied()));
            f(tape, &vars[..nd], &bound)
        },
        &inputs,
        opts,
    )
}

fn small_rias() -> RiasConfig {
    RiasConfig {
        channels: 3,
        points: 2,
        lidar_scales: 2,
        camera_scales: 2,
        frames: 2,
        offset_factor: 2.0,
    }
}

fn random_box(rng: &mut ChaCha8Rng) -> Box3D {
    Box3D::new(
        [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(0.0..1.5)],
        [rng.random_range(0.5..4.0), rng.random_range(0.5..2.0), rng.random_range(0.8..2.0)],
        rng.random_range(-3.0..3.0),
    )
    .with_velocity([rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
}

fn check_bilinear(rng: &mut ChaCha8Rng, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let (h, w, c, p) = (5, 6, 3, 7);
    let map = uniform(&[h, w, c], -1.0, 1.0, rng);
    // Coordinates straddle the border so zero padding is exercised.
    let coords = Tensor::from_fn(&[p, 2], |i| {
        let ext = if i % 2 == 0 { w } else { h } as f64;
        rng.random_range(-1.0..ext + 1.0)
    });
    let proj = uniform(&[p, c], -1.0, 1.0, rng);
    grad_check_with(
        |tape, v| {
            let y = tape.bilinear_sample(v[0], v[1])?;
            project(tape, y, &proj)
        },
        &[map, coords],
        opts,
    )
}

fn check_layer_norm(rng: &mut ChaCha8Rng, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let (n, c) = (4, 6);
    let x = uniform(&[n, c], -2.0, 2.0, rng);
    let gain = uniform(&[c], 0.5, 1.5, rng);
    let shift = uniform(&[c], -0.5, 0.5, rng);
    let proj = uniform(&[n, c], -1.0, 1.0, rng);
    grad_check_with(
        |tape, v| {
            let y = tape.layer_norm(v[0], v[1], v[2])?;
            project(tape, y, &proj)
        },
        &[x, gain, shift],
        opts,
    )
}

fn check_softmax(rng: &mut ChaCha8Rng, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let x = uniform(&[3, 2, 5], -3.0, 3.0, rng);
    let proj = uniform(&[3, 2, 5], -1.0, 1.0, rng);
    grad_check_with(
        |tape, v| {
            let y = tape.softmax(v[0])?;
            project(tape, y, &proj)
        },
        &[x],
        opts,
    )
}

fn check_adaptive_mix(rng: &mut ChaCha8Rng, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let (n, s, c) = (3, 4, 3);
    let mut store = ParamStore::new();
    init_mix(&mut store, "mix", s, c, rng);
    jitter(&mut store, 0.2, rng);
    let q = uniform(&[n, c], -1.0, 1.0, rng);
    let f = uniform(&[n, s, c], -1.0, 1.0, rng);
    let proj = uniform(&[n, c], -1.0, 1.0, rng);
    check_with_params(&store, vec![q, f], opts, |tape, v, p| {
        let y = adaptive_mix(tape, p, "mix", v[0], v[1])?;
        project(tape, y, &proj)
    })
}

fn check_sample_lidar(rng: &mut ChaCha8Rng, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let cfg = small_rias();
    let (n, r, k, c) = (3, cfg.lidar_scales, cfg.points, cfg.channels);
    let range = DetectionRange {
        x: (-4.0, 4.0),
        y: (-4.0, 4.0),
        z: (-2.0, 2.0),
    };
    let mut inputs = vec![
        uniform(&[n, 2], -4.5, 4.5, rng),
        uniform(&[n, r, k, 2], -1.0, 1.0, rng),
        uniform(&[n, r * k], -1.0, 1.0, rng),
    ];
    for g in [8usize, 4] {
        inputs.push(uniform(&[g, g, c], -1.0, 1.0, rng));
    }
    let proj = uniform(&[n, k, c], -1.0, 1.0, rng);
    grad_check_with(
        |tape, v| {
            let weights = tape.softmax(v[2])?;
            let pattern = SamplingPattern { offsets: v[1], weights };
            let y = sample_lidar(tape, v[0], &pattern, &v[3..], &range, &cfg)?;
            project(tape, y, &proj)
        },
        &inputs,
        opts,
    )
}

/// Two-view rig with a moving ego so temporal alignment is non-trivial.
pub fn small_rig(frames: usize) -> Result<CameraRig> {
    let poses = (0..frames)
        .map(|t| Rigid3::from_yaw(-0.05 * t as f64, [-0.6 * t as f64, 0.1 * t as f64, 0.0]))
        .collect();
    CameraRig::surround(2, 120.0, (16, 12), 1.0, poses)
}

fn check_sample_camera(rng: &mut ChaCha8Rng, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let cfg = small_rias();
    let (n, t, k, m, c) = (3, cfg.frames, cfg.points, cfg.camera_scales, cfg.channels);
    let rig = small_rig(t)?;
    let strides = [2.0, 4.0];
    let centers = Tensor::from_fn(&[n, 3], |i| match i % 3 {
        0 => rng.random_range(2.0..7.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 },
        1 => rng.random_range(-3.0..3.0),
        _ => rng.random_range(0.0..1.5),
    });
    let mut inputs = vec![
        centers,
        uniform(&[n, t, k, 3], -0.5, 0.5, rng),
        uniform(&[n, t, m * k], -1.0, 1.0, rng),
    ];
    for _v in 0..rig.num_views() {
        for s in strides {
            for _t in 0..t {
                let (w, h) = ((16.0 / s) as usize, (12.0 / s) as usize);
                inputs.push(uniform(&[h, w, c], -1.0, 1.0, rng));
            }
        }
    }
    let proj = uniform(&[n, t * k, c], -1.0, 1.0, rng);
    grad_check_with(
        |tape, v| {
            let weights = tape.softmax(v[2])?;
            let pattern = SamplingPattern { offsets: v[1], weights };
            let y = sample_camera(tape, v[0], &pattern, &v[3..], &rig, &strides, &cfg)?;
            project(tape, y, &proj)
        },
        &inputs,
        opts,
    )
}

fn check_predict_uncertainty(rng: &mut ChaCha8Rng, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let (n, s, c) = (4, 3, 4);
    let mut store = ParamStore::new();
    init_uaf(&mut store, "uaf", c, rng);
    jitter(&mut store, 0.3, rng);
    let f = uniform(&[n, s, c], -1.0, 1.0, rng);
    let pd = uniform(&[n, 1], -1.0, 1.0, rng);
    let pu = uniform(&[n, 1], -1.0, 1.0, rng);
    check_with_params(&store, vec![f], opts, |tape, v, p| {
        let (d, u) = predict_uncertainty(tape, p, "uaf.dist_cam", v[0])?;
        let a = project(tape, d, &pd)?;
        let b = project(tape, u, &pu)?;
        tape.add(a, b)
    })
}

fn check_fuse(rng: &mut ChaCha8Rng, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let (n, c) = (4, 3);
    let mut store = ParamStore::new();
    init_uaf(&mut store, "uaf", c, rng);
    jitter(&mut store, 0.3, rng);
    let inputs = vec![
        uniform(&[n, c], -1.0, 1.0, rng),
        uniform(&[n, 1], 0.0, 1.0, rng),
        uniform(&[n, c], -1.0, 1.0, rng),
        uniform(&[n, 1], 0.0, 1.0, rng),
    ];
    let proj = uniform(&[n, c], -1.0, 1.0, rng);
    check_with_params(&store, inputs, opts, |tape, v, p| {
        let y = fuse(tape, p, "uaf.fuse", v[0], v[1], v[2], v[3])?;
        project(tape, y, &proj)
    })
}

fn check_refine_box(rng: &mut ChaCha8Rng, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let (n, c, h) = (3, 4, 5);
    let mut store = ParamStore::new();
    store.init_linear("box.0", c, h, 1.0, rng);
    store.init_linear("box.1", h, BOX_PARAMS, 1.0, rng);
    jitter(&mut store, 0.2, rng);
    let boxes: Vec<Box3D> = (0..n).map(|_| random_box(rng)).collect();
    let q = uniform(&[n, c], -1.0, 1.0, rng);
    let proj = uniform(&[n, BOX_PARAMS], -1.0, 1.0, rng);
    check_with_params(&store, vec![q], opts, |tape, v, p| {
        let y = refine_params(tape, p, "box", v[0], &boxes, 1.0, 1.0)?;
        project(tape, y, &proj)
    })
}

/// Two supervised layers of four queries against two ground-truth boxes,
/// differentiated with respect to every prediction entry.
fn check_compute_loss(rng: &mut ChaCha8Rng, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let (n, layers) = (4, 2);
    let gt: Vec<Box3D> = (0..2).map(|i| random_box(rng).with_class(i % NUM_CLASSES)).collect();
    let inputs_boxes: Vec<Vec<Box3D>> = (0..layers).map(|_| (0..n).map(|_| random_box(rng)).collect()).collect();
    let cfg = LossConfig::default();
    let model = ModelConfig::default();
    // Per layer: logits, box params, dist_cam, dist_lid, reg_cam, reg_lid.
    let mut inputs = Vec::new();
    for _ in 0..layers {
        inputs.push(uniform(&[n, NUM_CLASSES], -3.0, 3.0, rng));
        inputs.push(uniform(&[n, BOX_PARAMS], -3.0, 3.0, rng));
        inputs.push(uniform(&[n, 1], 0.0, 4.0, rng));
        inputs.push(uniform(&[n, 1], 0.0, 4.0, rng));
        inputs.push(uniform(&[n, 2], -1.0, 1.0, rng));
        inputs.push(uniform(&[n, 2], -1.0, 1.0, rng));
    }
    let build = |tape: &mut Tape<f64>, v: &[Var]| -> Vec<LayerTrace> {
        (0..layers)
            .map(|l| {
                let v = &v[6 * l..6 * l + 6];
                let lv = tape.value(v[0]).data().to_vec();
                let scores = (0..n)
                    .map(|i| std::array::from_fn(|c| 1.0 / (1.0 + (-lv[i * NUM_CLASSES + c]).exp())))
                    .collect();
                LayerTrace {
                    input_boxes: inputs_boxes[l].clone(),
                    logits: v[0],
                    box_params: v[1],
                    dist_cam: v[2],
                    dist_lid: v[3],
                    reg_cam: v[4],
                    reg_lid: v[5],
                    boxes: inputs_boxes[l].clone(),
                    scores,
                    uncertainties: Vec::new(),
                    fusion_uncertainties: Vec::new(),
                }
            })
            .collect()
    };
    // Matching and distance targets are constants of the loss; fix them at
    // the unperturbed point.
    let targets = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let traces = build(&mut tape, &vars);
        loss_targets(&tape, &traces, &gt, &cfg, &model)?
    };
    if targets.iter().any(|t| t.pairs.len() != gt.len()) {
        return Err(Error::invalid("every ground-truth box must be matched"));
    }
    grad_check_with(
        |tape, v| {
            let traces = build(tape, v);
            Ok(compute_loss_with_targets(tape, &traces, &gt, &targets, &cfg, &model)?.0)
        },
        &inputs,
        opts,
    )
}

/// One check of `op` on the instance drawn from `seed`.
pub fn check_op(op: &str, seed: u64, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match op {
        "bilinear_sample" => check_bilinear(&mut rng, opts),
        "layer_norm" => check_layer_norm(&mut rng, opts),
        "softmax" => check_softmax(&mut rng, opts),
        "adaptive_mix" => check_adaptive_mix(&mut rng, opts),
        "sample_lidar" => check_sample_lidar(&mut rng, opts),
        "sample_camera" => check_sample_camera(&mut rng, opts),
        "predict_uncertainty" => check_predict_uncertainty(&mut rng, opts),
        "fuse" => check_fuse(&mut rng, opts),
        "refine_box" => check_refine_box(&mut rng, opts),
        "compute_loss" => check_compute_loss(&mut rng, opts),
        other => Err(Error::invalid(format!("unknown op `{}`", other))),
    }
}

/// Runs every op over `seeds` and keeps the worst case per op.
pub fn run_suite(seeds: std::ops::Range<u64>, tolerance: f64) -> Result<Vec<OpSummary>> {
    let opts = GradCheckOptions::with_tolerance(tolerance);
    OPS.iter()
        .map(|op| {
            let mut s = OpSummary {
                op: op.to_string(),
                seeds: 0,
                max_rel_error: 0.0,
                worst_seed: seeds.start,
                checked: 0,
                tolerance,
                passed: true,
            };
            for seed in seeds.clone() {
                let r = check_op(op, seed, opts)?;
                s.seeds += 1;
                s.checked += r.checked;
                if r.max_rel_error > s.max_rel_error || r.max_rel_error.is_nan() {
                    s.max_rel_error = r.max_rel_error;
                    s.worst_seed = seed;
                }
                s.passed &= r.passed;
            }
            Ok(s)
        })
        .collect()
}
