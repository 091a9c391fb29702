//! One function per acceptance criterion. Each returns whether it passed and
//! a one-line summary of the measured quantities.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sparselif::bench::{sample_camera_into, sample_lidar_into};
use sparselif::commands::{self, EvalOptions, CHECKPOINT_FILE, TRAIN_LOG_FILE};
use sparselif::config::RunConfig;
use sparselif::decoder::{assignment_cost, hungarian, Decoder, TrainLogLine, UncertaintySource};
use sparselif::eval::{nds, yaw_difference, Metrics};
use sparselif::geometry::{bev_rotated_iou, nms_3d, project_to_view, unproject_center, CameraRig, Rigid3};
use sparselif::gradsuite::run_suite;
use sparselif::paqg::{OracleNoise, QueryOrigin};
use sparselif::rias::{sample_camera, sample_lidar, SamplingPattern};
use sparselif::scenesim::{
    apply_scenario, generate_dataset, generate_scene, lidar_bev_features, ScenarioKind, ScenarioSpec, SceneSample,
};
use sparselif::tape::Tape;
use sparselif::tensor::Tensor;
use sparselif::uaf::FusionMode;

use super::*;

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: String) -> Self {
        Self { pass, detail }
    }
}

pub const NDS_TOLERANCE: f64 = 5e-4 + 1e-12;
pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const GRAD_SEEDS: u64 = 100;
pub const GRAD_BUDGET_SECS: f64 = 120.0;
pub const SAMPLING_TOLERANCE: f64 = 1e-10;
pub const ROUND_TRIP_TOLERANCE: f64 = 1e-6;
pub const IOU_TOLERANCE: f64 = 0.01;
pub const IOU_SAMPLES: usize = 400_000;
pub const DECODE_TOLERANCE: f64 = 1e-9;
pub const MIN_MAP_2M: f64 = 0.6;
pub const MAX_ATE: f64 = 1.0;
/// NDS difference below which two drops count as a tie.
pub const DROP_TIE: f64 = 0.005;
pub const ROBUSTNESS_SEEDS: [u64; 3] = [1007, 1008, 1009];
pub const TRAIN_SEED: u64 = 7;

/// Detector result rows in percent: mATE, mASE, mAOE, mAVE, mAAE, mAP
/// and the NDS printed next to them.
pub const REFERENCE_ROWS: [(&str, [f64; 7]); 22] = [
    ("TransFusion", [25.9, 24.3, 35.9, 28.8, 12.7, 68.9, 71.7]),
    ("FUTR3D", [28.4, 24.1, 31.0, 30.0, 12.0, 69.4, 72.1]),
    ("AutoAlignV2", [24.5, 23.3, 31.1, 25.8, 13.3, 68.4, 72.4]),
    ("BEVFusion (a)", [26.1, 23.9, 32.9, 26.0, 13.4, 70.2, 72.9]),
    ("BEVFusion (b)", [25.0, 24.0, 35.9, 25.4, 13.2, 71.3, 73.3]),
    ("DeepInteraction", [25.7, 24.0, 32.5, 24.5, 12.8, 70.8, 73.4]),
    ("MSMDFusion", [25.5, 23.8, 31.0, 24.4, 13.2, 71.5, 74.0]),
    ("CMT", [27.9, 23.5, 30.8, 25.9, 11.2, 72.0, 74.1]),
    ("EA-LSS", [24.7, 23.7, 30.4, 25.0, 13.3, 72.2, 74.4]),
    ("UniTR", [24.1, 22.9, 25.6, 24.0, 13.1, 70.9, 74.5]),
    ("FocalFormer3D-F", [25.1, 24.2, 32.8, 22.6, 12.6, 72.4, 74.5]),
    ("DAL", [25.3, 23.8, 33.4, 17.4, 12.0, 72.0, 74.8]),
    ("FusionFormer", [26.7, 23.6, 28.6, 22.5, 10.5, 72.6, 75.1]),
    ("SparseLIF-T", [24.1, 22.9, 27.8, 15.4, 11.8, 74.4, 77.0]),
    ("PAI3D", [24.5, 23.3, 30.8, 23.3, 13.1, 71.4, 74.2]),
    ("Lift-Attend-Splat", [24.3, 23.8, 34.5, 32.8, 13.3, 75.5, 74.9]),
    ("BEVFusion (ens)", [24.2, 22.7, 32.0, 22.2, 13.0, 75.0, 76.1]),
    ("DeepInteraction (ens)", [23.5, 23.3, 32.8, 22.6, 13.0, 75.6, 76.3]),
    ("CMT (ens)", [23.3, 22.0, 27.1, 21.2, 12.7, 75.3, 77.0]),
    ("BEVFusion4D (ens)", [22.9, 22.9, 30.2, 22.5, 13.5, 76.8, 77.2]),
    ("EA-LSS (ens)", [23.4, 22.8, 27.8, 20.4, 12.4, 76.6, 77.6]),
    ("SparseLIF-T (tta)", [24.3, 23.1, 28.4, 15.2, 11.7, 75.9, 77.7]),
];

pub fn nds_arithmetic() -> Outcome {
    let mut worst = (0.0f64, "");
    let mut pass = true;
    for (name, row) in REFERENCE_ROWS {
        let r = row.map(|v| v / 100.0);
        match nds(r[5], &r[..5]) {
            Ok(v) => {
                let d = (v - r[6]).abs();
                if d > worst.0 {
                    worst = (d, name);
                }
                pass &= d <= NDS_TOLERANCE;
            }
            Err(_) => pass = false,
        }
    }
    let headline = nds(0.744, &[0.241, 0.229, 0.278, 0.154, 0.118]).unwrap_or(f64::NAN);
    pass &= (headline - 0.770).abs() <= NDS_TOLERANCE;
    Outcome::new(
        pass,
        format!(
            "nds(0.744, ...) = {:.5}; {} rows, worst |diff| {:.2e} ({}), tol {:.0e}",
            headline,
            REFERENCE_ROWS.len(),
            worst.0,
            worst.1,
            NDS_TOLERANCE
        ),
    )
}

pub fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let summaries = match run_suite(0..GRAD_SEEDS, GRAD_TOLERANCE) {
        Ok(s) => s,
        Err(e) => return Outcome::new(false, format!("suite error: {}", e)),
    };
    let secs = start.elapsed().as_secs_f64();
    let worst = summaries
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .expect("ops are listed");
    let failed: Vec<&str> = summaries.iter().filter(|s| !s.passed).map(|s| s.op.as_str()).collect();
    let pass = failed.is_empty() && summaries.len() == 10 && secs < GRAD_BUDGET_SECS;
    Outcome::new(
        pass,
        format!(
            "{} ops x {} seeds in {:.1}s; worst rel err {:.2e} ({}); tol {:.0e}{}",
            summaries.len(),
            GRAD_SEEDS,
            secs,
            worst.max_rel_error,
            worst.op,
            GRAD_TOLERANCE,
            if failed.is_empty() {
                String::new()
            } else {
                format!("; failed {:?}", failed)
            }
        ),
    )
}

/// Tape and kernel sampling outputs against the dense references on one
/// random instance: `(lidar tape, camera tape, lidar kernel, camera kernel)`.
pub fn sampling_errors(case: &SamplingCase) -> [f64; 4] {
    let cfg = &case.cfg;
    let n = case.centers.len();
    let (r, t, k, m) = (cfg.lidar_scales, cfg.frames, cfg.points, cfg.camera_scales);
    let mut tape = Tape::<f64>::new();
    let xy = tape.constant(Tensor::from_fn(&[n, 2], |i| case.centers[i / 2][i % 2]));
    let xyz = tape.constant(Tensor::from_fn(&[n, 3], |i| case.centers[i / 3][i % 3]));
    let lp = SamplingPattern {
        offsets: tape.leaf(Tensor::new(vec![n, r, k, 2], case.lidar_offsets.clone()).unwrap()),
        weights: tape.leaf(Tensor::new(vec![n, r * k], case.lidar_weights.clone()).unwrap()),
    };
    let cp = SamplingPattern {
        offsets: tape.leaf(Tensor::new(vec![n, t, k, 3], case.camera_offsets.clone()).unwrap()),
        weights: tape.leaf(Tensor::new(vec![n, t, m * k], case.camera_weights.clone()).unwrap()),
    };
    let lidar_maps: Vec<_> = case.lidar.maps.iter().map(|mp| tape.constant(mp.data.clone())).collect();
    let camera_maps: Vec<_> = case.camera.maps().iter().map(|mp| tape.constant(mp.data.clone())).collect();
    let f_lid = sample_lidar(&mut tape, xy, &lp, &lidar_maps, &case.range, cfg).unwrap();
    let f_cam = sample_camera(&mut tape, xyz, &cp, &camera_maps, &case.rig, &case.camera.strides, cfg).unwrap();

    let xy_centers: Vec<[f64; 2]> = case.centers.iter().map(|c| [c[0], c[1]]).collect();
    let want_lid = ref_sample_lidar(
        &xy_centers,
        &case.lidar_offsets,
        &case.lidar_weights,
        &case.lidar.maps,
        &case.range,
        cfg,
    );
    let want_cam = ref_sample_camera(
        &case.centers,
        &case.camera_offsets,
        &case.camera_weights,
        &case.camera,
        &case.rig,
        cfg,
    );
    let boxes = case.boxes();
    let mut got_lid = vec![0.0; want_lid.len()];
    sample_lidar_into(
        &boxes,
        &case.lidar_offsets,
        &case.lidar_weights,
        &case.lidar.maps,
        &case.range,
        cfg,
        &mut got_lid,
    );
    let mut got_cam = vec![0.0; want_cam.len()];
    sample_camera_into(
        &boxes,
        &case.camera_offsets,
        &case.camera_weights,
        &case.camera,
        &case.rig,
        cfg,
        &mut got_cam,
    );
    [
        max_abs_diff(tape.value(f_lid).data(), &want_lid),
        max_abs_diff(tape.value(f_cam).data(), &want_cam),
        max_abs_diff(&got_lid, &want_lid),
        max_abs_diff(&got_cam, &want_cam),
    ]
}

pub fn sampling_equivalence(cases: u64) -> Outcome {
    let mut worst = [0.0f64; 4];
    let mut dims = std::collections::BTreeSet::new();
    for seed in 0..cases {
        let case = SamplingCase::random(&mut ChaCha8Rng::seed_from_u64(seed));
        let c = &case.cfg;
        dims.insert((case.rig.num_views(), c.camera_scales, c.lidar_scales, c.frames, c.points));
        for (w, e) in worst.iter_mut().zip(sampling_errors(&case)) {
            *w = w.max(e);
        }
    }
    let max = worst.iter().copied().fold(0.0, f64::max);
    Outcome::new(
        max <= SAMPLING_TOLERANCE,
        format!(
            "{} configs ({} distinct V/M/R/T/K); max err lidar {:.1e} camera {:.1e}, kernels {:.1e} / {:.1e}; tol {:.0e}",
            cases,
            dims.len(),
            worst[0],
            worst[1],
            worst[2],
            worst[3],
            SAMPLING_TOLERANCE
        ),
    )
}

/// Largest metric error of `unproject -> project -> unproject` over points
/// drawn inside the frusta of a surround rig.
pub fn projection_round_trip(points: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let rig = CameraRig::surround(6, 100.0, (160, 96), 1.6, vec![Rigid3::identity()]).unwrap();
    let (mut meters, mut pixels) = (0.0f64, 0.0f64);
    for _ in 0..points {
        let v = rng.random_range(0..rig.num_views());
        let view = &rig.views[v];
        let (u, w) = (rng.random_range(0.0..160.0), rng.random_range(0.0..96.0));
        let depth = rng.random_range(0.5..80.0);
        let p = unproject_center(u, w, depth, view).unwrap();
        let Some((u2, w2, d2)) = project_to_view(p, view) else {
            return (f64::INFINITY, f64::INFINITY);
        };
        let Some((u3, w3)) = ref_project(p, &rig, v) else {
            return (f64::INFINITY, f64::INFINITY);
        };
        pixels = pixels.max((u2 - u).abs()).max((w2 - w).abs()).max((u3 - u).abs()).max((w3 - w).abs());
        let q = unproject_center(u2, w2, d2, view).unwrap();
        let err = ((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2) + (q[2] - p[2]).powi(2)).sqrt();
        meters = meters.max(err);
    }
    (meters, pixels)
}

pub fn iou_vs_monte_carlo(pairs: usize, rng: &mut ChaCha8Rng) -> (f64, usize) {
    let mut worst = 0.0f64;
    let mut overlapping = 0;
    for _ in 0..pairs {
        let a = random_box(rng, 1.5);
        let b = random_box(rng, 1.5);
        let exact = bev_rotated_iou(&a, &b);
        overlapping += (exact > 0.0) as usize;
        let mc = monte_carlo_iou(&a, &b, IOU_SAMPLES, rng);
        worst = worst.max((exact - mc).abs());
    }
    (worst, overlapping)
}

pub fn random_scored_boxes(rng: &mut ChaCha8Rng) -> Vec<Box3D> {
    let n = rng.random_range(0..=50);
    (0..n)
        .map(|_| {
            // Coarse scores so that ties occur.
            let score = (rng.random_range(0.0..1.0f64) * 20.0).round() / 20.0;
            random_box(rng, 8.0).with_score(score)
        })
        .collect()
}

pub fn nms_mismatches(sets: usize, rng: &mut ChaCha8Rng) -> (usize, usize) {
    let mut bad = 0;
    let mut suppressed = 0;
    for _ in 0..sets {
        let boxes = random_scored_boxes(rng);
        let threshold = [0.1, 0.3, 0.5][rng.random_range(0..3)];
        let got = nms_3d(&boxes, threshold);
        let want = brute_force_nms(&boxes, threshold);
        suppressed += boxes.len() - want.len();
        bad += (got != want) as usize;
    }
    (bad, suppressed)
}

pub fn hungarian_mismatches(trials_per_shape: usize, rng: &mut ChaCha8Rng) -> (usize, f64) {
    let mut bad = 0;
    let mut worst = 0.0f64;
    for rows in 1..=8 {
        for cols in 1..=8 {
            for _ in 0..trials_per_shape {
                let cost: Vec<Vec<f64>> = (0..rows)
                    .map(|_| (0..cols).map(|_| rng.random_range(0.0..10.0)).collect())
                    .collect();
                let Ok(assign) = hungarian(&cost) else {
                    bad += 1;
                    continue;
                };
                let mut used = vec![false; cols];
                let mut valid = assign.len() == rows;
                for c in assign.iter().flatten() {
                    valid &= *c < cols && !used[*c];
                    if *c < cols {
                        used[*c] = true;
                    }
                }
                valid &= assign.iter().flatten().count() == rows.min(cols);
                let d = (assignment_cost(&cost, &assign) - exhaustive_assignment(&cost)).abs();
                worst = worst.max(d);
                bad += (!valid || d > 1e-9) as usize;
            }
        }
    }
    (bad, worst)
}

pub fn geometry_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (meters, pixels) = projection_round_trip(10_000, &mut rng);
    let (iou_err, overlapping) = iou_vs_monte_carlo(1000, &mut rng);
    let (nms_bad, suppressed) = nms_mismatches(200, &mut rng);
    let (hung_bad, hung_err) = hungarian_mismatches(3, &mut rng);
    let pass = meters < ROUND_TRIP_TOLERANCE && pixels < 1e-6 && iou_err <= IOU_TOLERANCE && nms_bad == 0 && hung_bad == 0;
    Outcome::new(
        pass,
        format!(
            "round trip {:.1e} m / {:.1e} px; IoU vs MC {:.4} ({} of 1000 overlapping); NMS {} of 200 differ ({} suppressed); Hungarian {} bad, max gap {:.1e}",
            meters, pixels, iou_err, overlapping, nms_bad, suppressed, hung_bad, hung_err
        ),
    )
}

/// Per-scene check of proposal-seeded decoding with a noiseless detector and
/// untrained (zero residual) box heads: `(covered objects, missed objects,
/// worst center error, worst yaw error)`.
pub fn decode_fidelity(decoder: &Decoder<f64>, scene: &SceneSample) -> (usize, usize, f64, f64) {
    let camera = scene.camera.cast::<f64>();
    let lidar = scene.lidar.cast::<f64>();
    let queries = decoder.queries(scene.id, &scene.boxes, &camera, &scene.rig).unwrap();
    let layers = decoder
        .predict(&camera, &lidar, &scene.rig, &queries, UncertaintySource::Predicted)
        .unwrap();
    let last = layers.last().unwrap();
    let (mut ate, mut aoe) = (0.0f64, 0.0f64);
    let mut covered = vec![false; scene.boxes.len()];
    for (q, b) in queries.iter().zip(&last.boxes) {
        if q.origin != QueryOrigin::Proposal {
            continue;
        }
        let (gi, g) = scene
            .boxes
            .iter()
            .enumerate()
            .min_by(|x, y| b.bev_distance(x.1).total_cmp(&b.bev_distance(y.1)))
            .unwrap();
        covered[gi] = true;
        ate = ate.max(b.bev_distance(g));
        aoe = aoe.max(yaw_difference(b.yaw, g.yaw));
    }
    let visible: Vec<bool> = scene
        .boxes
        .iter()
        .map(|g| scene.rig.views.iter().any(|v| project_to_view(g.center, v).is_some()))
        .collect();
    let n_cov = covered.iter().filter(|c| **c).count();
    let missed = visible.iter().zip(&covered).filter(|(v, c)| **v && !**c).count();
    (n_cov, missed, ate, aoe)
}

pub fn paqg_fidelity(scenes: usize) -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.model.queries.oracle = OracleNoise::noiseless();
    let decoder = Decoder::<f64>::new(cfg.model.clone(), cfg.sensors.clone(), 3).unwrap();
    let data = generate_dataset(&cfg.sensors, &cfg.sim, 21, scenes).unwrap();
    let (mut covered, mut missed, mut ate, mut aoe) = (0, 0, 0.0f64, 0.0f64);
    for s in &data {
        let (c, m, a, o) = decode_fidelity(&decoder, s);
        covered += c;
        missed += m;
        ate = ate.max(a);
        aoe = aoe.max(o);
    }
    Outcome::new(
        covered > 0 && missed == 0 && ate <= DECODE_TOLERANCE && aoe <= DECODE_TOLERANCE,
        format!(
            "{} scenes, {} covered objects, {} visible objects without a proposal; max ATE {:.1e} m, max AOE {:.1e} rad",
            scenes, covered, missed, ate, aoe
        ),
    )
}

/// Desk configuration with every seed set to `seed`.
pub fn desk_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.train.seed = seed;
    cfg.scenario.seed = seed;
    cfg
}

/// Means of consecutive non-overlapping windows of `width` values.
pub fn window_means(values: &[f64], width: usize) -> Vec<f64> {
    values.chunks_exact(width).map(|w| w.iter().sum::<f64>() / width as f64).collect()
}

pub fn read_train_log(path: &Path) -> Vec<TrainLogLine> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// Mean AP at one distance threshold over classes with ground truth.
pub fn map_at(metrics: &Metrics, threshold: f64) -> f64 {
    let i = metrics
        .thresholds
        .iter()
        .position(|t| (*t - threshold).abs() < 1e-12)
        .expect("threshold is evaluated");
    let aps: Vec<f64> = metrics.classes.iter().filter_map(|c| c.ap[i]).collect();
    aps.iter().sum::<f64>() / aps.len().max(1) as f64
}

/// Generates the training set and trains one model into `work/<name>`.
pub fn train_model(work: &Path, fusion: FusionMode, name: &str) -> sparselif::error::Result<PathBuf> {
    let mut cfg = desk_config(TRAIN_SEED);
    cfg.model.fusion = fusion;
    let data = work.join("train_data");
    if !data.join("manifest.json").exists() {
        commands::cmd_generate(&cfg, &data, false)?;
    }
    let out = work.join(name);
    commands::cmd_train(&cfg, &data, &out, None)?;
    Ok(out)
}

pub fn toy_training(work: &Path) -> (Outcome, Option<PathBuf>) {
    let cfg = desk_config(TRAIN_SEED);
    let (s, m) = (&cfg.sensors, &cfg.model);
    let shape_ok = cfg.sim.num_scenes == 64
        && cfg.sim.max_objects == 8
        && s.num_views == 4
        && s.camera_strides.len() == 2
        && s.lidar_scales == 2
        && s.num_frames == 2
        && s.channels == 32
        && m.queries.num_queries == 60
        && m.layers == 3
        && cfg.train.steps == 2000;
    let start = Instant::now();
    let out = match train_model(work, FusionMode::Uaf, "uaf") {
        Ok(o) => o,
        Err(e) => return (Outcome::new(false, format!("training failed: {}", e)), None),
    };
    let train_secs = start.elapsed().as_secs_f64();
    let log = read_train_log(&out.join(TRAIN_LOG_FILE));
    let losses: Vec<f64> = log.iter().map(|l| l.loss).collect();
    let blocks = window_means(&losses[..500.min(losses.len())], 50);
    let decreasing = blocks.len() == 10 && blocks.windows(2).all(|w| w[1] < w[0]);
    let checkpoint = out.join(CHECKPOINT_FILE);
    let opts = EvalOptions::default();
    let metrics = commands::load_model(&cfg, Some(&checkpoint), &opts).and_then(|(decoder, _)| {
        let (_, scenes) = commands::load_dataset(&cfg, &work.join("train_data"))?;
        commands::evaluate_scenes(&decoder, &scenes, &ScenarioSpec::default(), false, &cfg.eval)
    });
    let (metrics, _) = match metrics {
        Ok(m) => m,
        Err(e) => return (Outcome::new(false, format!("evaluation failed: {}", e)), Some(checkpoint)),
    };
    let map2 = map_at(&metrics, 2.0);
    let pass = shape_ok && decreasing && log.len() == 2000 && map2 >= MIN_MAP_2M && metrics.ate <= MAX_ATE;
    let shown: Vec<String> = blocks.iter().map(|b| format!("{:.2}", b)).collect();
    (
        Outcome::new(
            pass,
            format!(
                "{} steps in {:.0}s; window-50 means [{}]; final loss {:.3}; mAP@2m {:.3} (>= {}), ATE {:.3} m (<= {}){}",
                log.len(),
                train_secs,
                shown.join(", "),
                losses.last().copied().unwrap_or(f64::NAN),
                map2,
                MIN_MAP_2M,
                metrics.ate,
                MAX_ATE,
                if shape_ok { "" } else { "; desk shape differs" }
            ),
        ),
        Some(checkpoint),
    )
}

pub const ROBUSTNESS_CASES: [&str; 4] = ["fov120", "object_failure", "front_occlusion", "stuck"];

/// NDS drops `[scenario][seed]` relative to clean, with oracle uncertainties.
pub fn nds_drops(checkpoint: &Path, seeds: &[u64]) -> sparselif::error::Result<Vec<Vec<f64>>> {
    let mut drops = vec![Vec::new(); ROBUSTNESS_CASES.len()];
    for &seed in seeds {
        let cfg = desk_config(seed);
        let (decoder, _) = commands::load_model(&cfg, Some(checkpoint), &EvalOptions::default())?;
        let scenes = generate_dataset(&cfg.sensors, &cfg.sim, seed, cfg.sim.num_scenes)?;
        let clean = commands::evaluate_scenes(&decoder, &scenes, &ScenarioSpec::default(), true, &cfg.eval)?.0.nds;
        for (i, name) in ROBUSTNESS_CASES.iter().enumerate() {
            let spec = ScenarioSpec::named(name, seed)?;
            let nds = commands::evaluate_scenes(&decoder, &scenes, &spec, true, &cfg.eval)?.0.nds;
            drops[i].push(clean - nds);
        }
    }
    Ok(drops)
}

pub fn robustness_ordering(work: &Path, uaf: Option<&Path>) -> Outcome {
    let uaf = match uaf {
        Some(p) => p.to_path_buf(),
        None => match train_model(work, FusionMode::Uaf, "uaf") {
            Ok(o) => o.join(CHECKPOINT_FILE),
            Err(e) => return Outcome::new(false, format!("training failed: {}", e)),
        },
    };
    let equal = match train_model(work, FusionMode::Equal, "equal") {
        Ok(o) => o.join(CHECKPOINT_FILE),
        Err(e) => return Outcome::new(false, format!("training failed: {}", e)),
    };
    let (du, de) = match (nds_drops(&uaf, &ROBUSTNESS_SEEDS), nds_drops(&equal, &ROBUSTNESS_SEEDS)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return Outcome::new(false, format!("evaluation failed: {}", e)),
    };
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut pass = true;
    let mut parts = Vec::new();
    for (i, name) in ROBUSTNESS_CASES.iter().enumerate() {
        let (u, e) = (mean(&du[i]), mean(&de[i]));
        let ok = if i == 0 { u <= e } else { u <= e + DROP_TIE };
        pass &= ok;
        parts.push(format!("{} uaf {:.4} vs equal {:.4}{}", name, u, e, if ok { "" } else { " (X)" }));
    }
    Outcome::new(
        pass,
        format!("mean NDS drop over seeds {:?}: {}", ROBUSTNESS_SEEDS, parts.join("; ")),
    )
}

/// Azimuth test through the cosine of the angle to the forward axis.
pub fn within_forward_cone(x: f64, y: f64, half_angle_deg: f64) -> bool {
    let r = x.hypot(y);
    r > 0.0 && x / r >= half_angle_deg.to_radians().cos()
}

pub fn scenario_correctness() -> Outcome {
    let cfg = RunConfig::default();
    let layout = &cfg.sensors;
    let scenes = generate_dataset(layout, &cfg.sim, 31, 12).unwrap();

    let fov = ScenarioSpec::named("fov120", 0).unwrap();
    let (mut fov_bad, mut kept, mut total) = (0usize, 0usize, 0usize);
    for s in &scenes {
        let out = apply_scenario(s, &fov, layout).unwrap();
        for (before, after) in s.points.iter().zip(&out.points) {
            let want: Vec<_> = before
                .iter()
                .filter(|p| within_forward_cone(f64::from(p.pos[0]), f64::from(p.pos[1]), 60.0))
                .copied()
                .collect();
            fov_bad += (want != *after) as usize;
            kept += after.len();
            total += before.len();
        }
        let lidar = lidar_bev_features(&out.points[0], layout).unwrap();
        fov_bad += (lidar != out.lidar) as usize;
        fov_bad += (out.camera != s.camera) as usize;
    }

    let occ = ScenarioSpec::named("front_occlusion", 0).unwrap();
    let mut occ_bad = 0usize;
    for s in &scenes {
        let out = apply_scenario(s, &occ, layout).unwrap();
        let cam = &out.camera;
        for v in 0..cam.num_views {
            for m in 0..cam.num_scales {
                for t in 0..cam.num_frames {
                    let ok = if v == 0 {
                        cam.get(v, m, t).is_zero() && !s.camera.get(v, m, t).is_zero()
                    } else {
                        cam.get(v, m, t) == s.camera.get(v, m, t)
                    };
                    occ_bad += (!ok) as usize;
                }
            }
        }
        occ_bad += (out.points != s.points || out.lidar != s.lidar) as usize;
    }

    let (dropped, objects, rate) = object_failure_rate(1000, 0);
    let sigma = (rate * (1.0 - rate) / objects as f64).sqrt();
    let frac = dropped as f64 / objects as f64;
    let of_ok = objects == 1000 && (frac - rate).abs() <= 3.0 * sigma;

    Outcome::new(
        fov_bad == 0 && occ_bad == 0 && of_ok,
        format!(
            "fov120 kept {} of {} returns, {} mismatches; front_occlusion {} mismatches; object_failure dropped {}/{} = {:.3} vs {:.3} +- {:.3} (3 sigma)",
            kept,
            total,
            fov_bad,
            occ_bad,
            dropped,
            objects,
            frac,
            rate,
            3.0 * sigma
        ),
    )
}

/// Runs the object-failure preset over `objects` single-object samples that
/// have LiDAR returns and counts objects left without any return. Returns
/// `(dropped, objects, frame_rate * object_rate)`.
pub fn object_failure_rate(objects: usize, seed: u64) -> (usize, usize, f64) {
    let mut cfg = RunConfig::default();
    cfg.sim.min_objects = 1;
    cfg.sim.max_objects = 1;
    let layout = &cfg.sensors;
    let spec = ScenarioSpec::named("object_failure", seed).unwrap();
    let ScenarioKind::ObjectFailure { frame_rate, object_rate } = spec.kind else {
        unreachable!("preset kind");
    };
    let mut bases = Vec::new();
    let mut id = 0;
    while bases.len() < 16 {
        let s = generate_scene(layout, &cfg.sim, 5, id).unwrap();
        id += 1;
        if s.points.iter().all(|sweep| sweep.iter().any(|p| p.object == 0)) {
            bases.push(s);
        }
    }
    let mut dropped = 0;
    for i in 0..objects {
        let mut s = bases[i % bases.len()].clone();
        s.id = 10_000 + i as u64;
        let out = apply_scenario(&s, &spec, layout).unwrap();
        let remaining: Vec<usize> = out
            .points
            .iter()
            .map(|sweep| sweep.iter().filter(|p| p.object == 0).count())
            .collect();
        if remaining.iter().all(|c| *c == 0) {
            dropped += 1;
        } else {
            // Either every return survives or none does.
            assert_eq!(out.points, s.points, "partial object failure");
        }
    }
    (dropped, objects, frame_rate * object_rate)
}

/// Every file under `dir`, relative path and bytes, in sorted order.
pub fn dir_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Small generate, train, eval pipeline into `root`.
pub fn pipeline(root: &Path, threads: usize) -> sparselif::error::Result<()> {
    let mut cfg = desk_config(13);
    cfg.sim.num_scenes = 8;
    cfg.train.steps = 20;
    cfg.train.threads = threads;
    cfg.scenario = sparselif::config::ScenarioConfig {
        kind: ScenarioKind::ObjectFailure {
            frame_rate: 0.5,
            object_rate: 0.5,
        },
        seed: 13,
    };
    let data = root.join("data");
    commands::cmd_generate(&cfg, &data, false)?;
    commands::cmd_train(&cfg, &data, &root.join("train"), None)?;
    let ck = root.join("train").join(CHECKPOINT_FILE);
    commands::cmd_eval(&cfg, Some(&ck), &data, &root.join("eval"), &EvalOptions::default())?;
    Ok(())
}

pub fn determinism(work: &Path) -> Outcome {
    let (a, b) = (work.join("run_a"), work.join("run_b"));
    for d in [&a, &b] {
        if let Err(e) = pipeline(d, 2) {
            return Outcome::new(false, format!("pipeline failed: {}", e));
        }
    }
    let (fa, fb) = (dir_bytes(&a), dir_bytes(&b));
    let differing: Vec<String> = fa
        .iter()
        .zip(&fb)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.display().to_string())
        .collect();
    Outcome::new(
        fa.len() == fb.len() && !fa.is_empty() && differing.is_empty(),
        format!(
            "dataset, checkpoint, log and eval reports: {} files compared byte for byte, {} differ {:?}",
            fa.len(),
            differing.len(),
            differing
        ),
    )
}
