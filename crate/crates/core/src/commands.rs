//! The operations behind each CLI subcommand. Every command validates its
//! configuration before touching the filesystem and writes deterministic
//! JSON.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bench::{bench_kernel, BenchReport, KERNELS};
use crate::config::{version_string, RunConfig};
use crate::decoder::{
    load_decoder, save_decoder, train, Decoder, LayerPrediction, TrainLogLine, TrainState, UncertaintySource,
};
use crate::error::{Error, Result};
use crate::eval::{distance_bins_csv, evaluate, EvalConfig, Metrics, SampleDetections};
use crate::geometry::Box3D;
use crate::gradsuite::{run_suite, OpSummary};
use crate::scenesim::{
    apply_scenario, generate_dataset, read_dataset, write_dataset, Manifest, ScenarioKind, ScenarioSpec, SceneSample,
};
use crate::uaf::{FusionMode, UncertaintyPair};

pub const CHECKPOINT_FILE: &str = "checkpoint.slck";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";

/// Evaluation-time switches that override the checkpoint.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalOptions {
    pub fusion: Option<FusionMode>,
    pub oracle_uncertainty: bool,
}

fn use_oracle(cfg: &RunConfig, opts: &EvalOptions) -> bool {
    opts.oracle_uncertainty || cfg.model.oracle_uncertainty
}

/// One evaluation run, serialized as the metrics report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub version: String,
    pub config_hash: String,
    pub dataset_hash: String,
    pub checkpoint_step: Option<u64>,
    pub scenario: String,
    pub scenario_kind: ScenarioKind,
    pub scenario_seed: u64,
    pub fusion: FusionMode,
    pub oracle_uncertainty: bool,
    pub num_samples: usize,
    pub metrics: Metrics,
    /// Mean predicted uncertainty over all final-layer queries.
    pub mean_uncertainty: UncertaintyPair,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub report: MetricsReport,
    /// Clean NDS minus scenario NDS.
    pub nds_drop: f64,
    pub map_drop: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub version: String,
    pub config_hash: String,
    pub fusion: FusionMode,
    pub oracle_uncertainty: bool,
    pub clean: MetricsReport,
    pub scenarios: Vec<ScenarioResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenePredictions {
    pub id: u64,
    pub detections: Vec<Box3D>,
    pub uncertainties: Vec<UncertaintyPair>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferReport {
    pub version: String,
    pub config_hash: String,
    pub checkpoint_step: Option<u64>,
    pub scenario: String,
    pub fusion: FusionMode,
    pub oracle_uncertainty: bool,
    pub scenes: Vec<ScenePredictions>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub first_step: u64,
    pub last_step: u64,
    pub final_loss: Option<f64>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub version: String,
    pub seeds: std::ops::Range<u64>,
    pub ops: Vec<OpSummary>,
    pub passed: bool,
}

/// `p`, or a config error naming `key` when it is missing.
pub fn require_path<'a>(p: Option<&'a Path>, key: &str) -> Result<&'a Path> {
    p.ok_or_else(|| Error::config(key, "path is required"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::invalid(e.to_string()))
}

/// Reads a dataset and checks that it was generated from this configuration.
pub fn load_dataset(cfg: &RunConfig, dir: &Path) -> Result<(Manifest, Vec<SceneSample>)> {
    let (manifest, scenes) = read_dataset(dir)?;
    let expected = cfg.dataset_hash();
    if manifest.config_hash != expected {
        return Err(Error::HashMismatch {
            expected,
            found: manifest.config_hash,
        });
    }
    Ok((manifest, scenes))
}

pub fn cmd_generate(cfg: &RunConfig, out: &Path, force: bool) -> Result<Manifest> {
    cfg.validate()?;
    let scenes = pool(cfg.train.threads)?.install(|| generate_dataset(&cfg.sensors, &cfg.sim, cfg.seed, cfg.sim.num_scenes))?;
    write_dataset(out, &scenes, &cfg.dataset_hash(), cfg.seed, force)
}

/// Trains until `cfg.train.steps` total updates, optionally continuing from
/// `resume`. Writes the checkpoint and a JSON-lines log into `out`.
pub fn cmd_train(cfg: &RunConfig, dataset: &Path, out: &Path, resume: Option<&Path>) -> Result<TrainSummary> {
    cfg.validate()?;
    let (_, scenes) = load_dataset(cfg, dataset)?;
    let (mut decoder, mut state) = match resume {
        Some(path) => {
            let (decoder, state, meta) = load_decoder::<f32>(path)?;
            if meta.model != cfg.model || meta.layout != cfg.sensors {
                return Err(Error::config("model", "checkpoint was trained with a different model or sensor layout"));
            }
            (decoder, state)
        }
        None => (
            Decoder::<f32>::new(cfg.model.clone(), cfg.sensors.clone(), cfg.train.seed)?,
            TrainState::new(&cfg.train),
        ),
    };
    fs::create_dir_all(out)?;
    let log_path = out.join(TRAIN_LOG_FILE);
    let mut log = std::io::BufWriter::new(fs::File::create(&log_path)?);
    let first_step = state.step;
    let mut last: Option<TrainLogLine> = None;
    pool(cfg.train.threads)?.install(|| {
        train(&mut decoder, &scenes, &cfg.train, &mut state, cfg.train.steps, |line| {
            serde_json::to_writer(&mut log, line)?;
            log.write_all(b"\n")?;
            last = Some(line.clone());
            Ok(())
        })
    })?;
    log.flush()?;
    let checkpoint = out.join(CHECKPOINT_FILE);
    save_decoder(&checkpoint, &decoder, &state, &cfg.train)?;
    Ok(TrainSummary {
        first_step,
        last_step: state.step,
        final_loss: last.map(|l| l.loss),
        checkpoint,
        log: log_path,
    })
}

/// Loads a checkpoint, or builds untrained heads when none is given.
pub fn load_model(cfg: &RunConfig, checkpoint: Option<&Path>, opts: &EvalOptions) -> Result<(Decoder<f32>, Option<u64>)> {
    let (mut decoder, step) = match checkpoint {
        Some(path) => {
            let (decoder, state, _) = load_decoder::<f32>(path)?;
            if decoder.layout != cfg.sensors {
                return Err(Error::config("sensors", "checkpoint sensor layout differs from the configuration"));
            }
            (decoder, Some(state.step))
        }
        None => (Decoder::new(cfg.model.clone(), cfg.sensors.clone(), cfg.train.seed)?, None),
    };
    if let Some(f) = opts.fusion {
        decoder.model.fusion = f;
    }
    Ok((decoder, step))
}

/// Final-layer predictions of every scene under `scenario`.
pub fn predict_scenes(
    decoder: &Decoder<f32>,
    scenes: &[SceneSample],
    scenario: &ScenarioSpec,
    oracle_uncertainty: bool,
) -> Result<Vec<LayerPrediction>> {
    scenario.validate()?;
    scenes
        .par_iter()
        .map(|scene| {
            let s = apply_scenario(scene, scenario, &decoder.layout)?;
            let queries = decoder.queries(s.id, &s.boxes, &s.camera, &s.rig)?;
            let source = if oracle_uncertainty {
                UncertaintySource::Oracle(&s.boxes)
            } else {
                UncertaintySource::Predicted
            };
            let mut layers = decoder.predict(&s.camera, &s.lidar, &s.rig, &queries, source)?;
            layers.pop().ok_or(Error::Empty("decoder layers"))
        })
        .collect()
}

/// Metrics and mean uncertainties of `decoder` on `scenes` under `scenario`.
pub fn evaluate_scenes(
    decoder: &Decoder<f32>,
    scenes: &[SceneSample],
    scenario: &ScenarioSpec,
    oracle_uncertainty: bool,
    cfg: &EvalConfig,
) -> Result<(Metrics, UncertaintyPair)> {
    let preds = predict_scenes(decoder, scenes, scenario, oracle_uncertainty)?;
    let samples: Vec<SampleDetections> = scenes
        .iter()
        .zip(&preds)
        .map(|(s, p)| SampleDetections {
            gt: s.boxes.clone(),
            preds: p.detections(),
        })
        .collect();
    let metrics = evaluate(&samples, cfg)?;
    let all: Vec<&UncertaintyPair> = preds.iter().flat_map(|p| &p.uncertainties).collect();
    let n = all.len().max(1) as f64;
    let mean = UncertaintyPair {
        u_cam: all.iter().map(|u| u.u_cam).sum::<f64>() / n,
        u_lid: all.iter().map(|u| u.u_lid).sum::<f64>() / n,
    };
    Ok((metrics, mean))
}

fn report(
    cfg: &RunConfig,
    decoder: &Decoder<f32>,
    step: Option<u64>,
    scenes: &[SceneSample],
    scenario: &ScenarioSpec,
    oracle: bool,
) -> Result<MetricsReport> {
    let (metrics, mean_uncertainty) = evaluate_scenes(decoder, scenes, scenario, oracle, &cfg.eval)?;
    Ok(MetricsReport {
        version: version_string(),
        config_hash: cfg.config_hash(),
        dataset_hash: cfg.dataset_hash(),
        checkpoint_step: step,
        scenario: scenario.name(),
        scenario_kind: scenario.kind.clone(),
        scenario_seed: scenario.seed,
        fusion: decoder.model.fusion,
        oracle_uncertainty: oracle,
        num_samples: scenes.len(),
        metrics,
        mean_uncertainty,
    })
}

fn check_frames(scenario: &ScenarioSpec, scenes: &[SceneSample]) -> Result<()> {
    if matches!(scenario.kind, ScenarioKind::Stuck { .. }) && scenes.iter().any(|s| s.rig.num_frames() < 2) {
        return Err(Error::config("scenario.kind", "the stuck scenario needs a dataset with at least two frames"));
    }
    Ok(())
}

/// Evaluates under the configured scenario; writes `metrics.json` and
/// `distance_bins.csv` into `out`.
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    dataset: &Path,
    out: &Path,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    cfg.validate()?;
    let scenario = cfg.scenario.spec();
    let (_, scenes) = load_dataset(cfg, dataset)?;
    check_frames(&scenario, &scenes)?;
    let (decoder, step) = load_model(cfg, checkpoint, opts)?;
    let oracle = use_oracle(cfg, opts);
    let r = pool(cfg.train.threads)?.install(|| report(cfg, &decoder, step, &scenes, &scenario, oracle))?;
    write_json(&out.join("metrics.json"), &r)?;
    fs::write(out.join("distance_bins.csv"), distance_bins_csv(&r.metrics.distance_bins))?;
    Ok(r)
}

/// Scenarios of a robustness sweep: every preset when the configured
/// scenario is clean, otherwise just the configured one.
pub fn robustness_scenarios(cfg: &RunConfig) -> Result<Vec<ScenarioSpec>> {
    let seed = cfg.scenario.seed;
    if cfg.scenario.kind == ScenarioKind::Clean {
        ScenarioSpec::PRESETS
            .iter()
            .filter(|n| **n != "clean")
            .map(|n| ScenarioSpec::named(n, seed))
            .collect()
    } else {
        Ok(vec![cfg.scenario.spec()])
    }
}

/// Clean baseline plus one report per scenario; writes `robustness.json`.
pub fn cmd_robustness(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    dataset: &Path,
    out: &Path,
    opts: &EvalOptions,
) -> Result<RobustnessReport> {
    cfg.validate()?;
    let scenarios = robustness_scenarios(cfg)?;
    let (_, scenes) = load_dataset(cfg, dataset)?;
    for s in &scenarios {
        check_frames(s, &scenes)?;
    }
    let (decoder, step) = load_model(cfg, checkpoint, opts)?;
    let oracle = use_oracle(cfg, opts);
    let r = pool(cfg.train.threads)?.install(|| -> Result<RobustnessReport> {
        let clean_spec = ScenarioSpec::new(ScenarioKind::Clean, cfg.scenario.seed);
        let clean = report(cfg, &decoder, step, &scenes, &clean_spec, oracle)?;
        let scenarios = scenarios
            .iter()
            .map(|s| {
                let r = report(cfg, &decoder, step, &scenes, s, oracle)?;
                Ok(ScenarioResult {
                    nds_drop: clean.metrics.nds - r.metrics.nds,
                    map_drop: clean.metrics.map - r.metrics.map,
                    report: r,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RobustnessReport {
            version: version_string(),
            config_hash: cfg.config_hash(),
            fusion: decoder.model.fusion,
            oracle_uncertainty: oracle,
            clean,
            scenarios,
        })
    })?;
    write_json(&out.join("robustness.json"), &r)?;
    Ok(r)
}

/// Final-layer detections per scene; writes `predictions.json`.
pub fn cmd_infer(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    dataset: &Path,
    out: &Path,
    opts: &EvalOptions,
) -> Result<InferReport> {
    cfg.validate()?;
    let scenario = cfg.scenario.spec();
    let (_, scenes) = load_dataset(cfg, dataset)?;
    check_frames(&scenario, &scenes)?;
    let (decoder, step) = load_model(cfg, checkpoint, opts)?;
    let oracle = use_oracle(cfg, opts);
    let preds = pool(cfg.train.threads)?.install(|| predict_scenes(&decoder, &scenes, &scenario, oracle))?;
    let r = InferReport {
        version: version_string(),
        config_hash: cfg.config_hash(),
        checkpoint_step: step,
        scenario: scenario.name(),
        fusion: decoder.model.fusion,
        oracle_uncertainty: oracle,
        scenes: scenes
            .iter()
            .zip(preds)
            .map(|(s, p)| ScenePredictions {
                id: s.id,
                detections: p.detections(),
                uncertainties: p.uncertainties,
            })
            .collect(),
    };
    write_json(&out.join("predictions.json"), &r)?;
    Ok(r)
}

/// Gradient checks of every op over `count` seeds starting at `cfg.seed`;
/// writes `gradcheck.json`.
pub fn cmd_gradcheck(cfg: &RunConfig, count: u64, out: &Path) -> Result<GradcheckReport> {
    cfg.validate()?;
    let seeds = cfg.seed..cfg.seed + count;
    let ops = run_suite(seeds.clone(), 1e-4)?;
    let r = GradcheckReport {
        version: version_string(),
        passed: ops.iter().all(|o| o.passed),
        seeds,
        ops,
    };
    write_json(&out.join("gradcheck.json"), &r)?;
    Ok(r)
}

/// Benchmarks every kernel at the configured shapes; writes `bench.json`.
pub fn cmd_bench(cfg: &RunConfig, repetitions: usize, out: &Path) -> Result<Vec<BenchReport>> {
    cfg.validate()?;
    let r = KERNELS
        .iter()
        .map(|k| bench_kernel(k, &cfg.model, &cfg.sensors, repetitions, cfg.seed))
        .collect::<Result<Vec<_>>>()?;
    write_json(&out.join("bench.json"), &r)?;
    Ok(r)
}
