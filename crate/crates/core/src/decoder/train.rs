use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{compute_loss, LossBreakdown, LossConfig};
use super::{bind_scene, Decoder, ModelConfig, UncertaintySource};
use crate::error::{Error, Result};
use crate::params::{collect_grads, load_checkpoint, save_checkpoint, Checkpoint, Sgd};
use crate::scenesim::{scene_rng, SceneSample, SensorLayout};
use crate::tape::Tape;
use crate::tensor::{Real, Tensor};

const ORDER_SALT: u64 = 0x0dde_c0de;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    /// Samples whose gradients are averaged per update.
    pub batch_size: usize,
    pub step_size: f64,
    pub momentum: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    /// Worker threads; results do not depend on this.
    pub threads: usize,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            step_size: 2e-3,
            momentum: 0.9,
            clip_norm: 50.0,
            seed: 0,
            threads: 8,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.threads == 0 {
            return Err(Error::invalid("batch size and threads must be positive"));
        }
        if !(self.step_size > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.clip_norm < 0.0 {
            return Err(Error::invalid("need step_size > 0, momentum in [0, 1), clip_norm >= 0"));
        }
        Ok(())
    }
}

/// One JSON line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogLine {
    pub step: u64,
    pub loss: f64,
    pub classification: f64,
    pub box_l1: f64,
    pub uncertainty: f64,
    pub regression: f64,
    pub grad_norm: f64,
}

/// Optimizer state and the number of completed updates.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub step: u64,
    pub optimizer: Sgd<T>,
}

impl<T: Real> TrainState<T> {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            step: 0,
            optimizer: Sgd::new(cfg.step_size, cfg.momentum, cfg.clip_norm),
        }
    }
}

/// Scene index of global sample `k`: scenes are visited in a fresh seeded
/// permutation every epoch.
fn scene_index(seed: u64, k: u64, n: usize, cache: &mut BTreeMap<u64, Vec<usize>>) -> usize {
    let epoch = k / n as u64;
    let order = cache.entry(epoch).or_insert_with(|| {
        let mut v: Vec<usize> = (0..n).collect();
        v.shuffle(&mut scene_rng(seed ^ ORDER_SALT, epoch));
        v
    });
    order[(k % n as u64) as usize]
}

type SampleGrads<T> = (BTreeMap<String, Tensor<T>>, LossBreakdown);

fn sample_gradients<T: Real + Send + Sync>(
    decoder: &Decoder<T>,
    scene: &SceneSample,
    cfg: &TrainConfig,
    k: u64,
) -> Result<SampleGrads<T>> {
    let camera = scene.camera.cast::<T>();
    let lidar = scene.lidar.cast::<T>();
    let queries = decoder.queries(scene.id, &scene.boxes, &camera, &scene.rig)?;
    let mut tape = Tape::new();
    let bound = decoder.params.bind(&mut tape, true);
    let vars = bind_scene(&mut tape, &camera, &lidar);
    let traces = decoder.forward(&mut tape, &bound, &queries, &vars, &scene.rig, UncertaintySource::Predicted)?;
    let (loss, parts) = compute_loss(&mut tape, &traces, &scene.boxes, &cfg.loss, &decoder.model)?;
    if !parts.total.is_finite() {
        return Err(Error::NonFinite(format!("loss at sample {}", k)));
    }
    let grads = tape.backward(loss)?;
    Ok((collect_grads(&bound, &grads, &decoder.params)?, parts))
}

/// Runs updates until `state.step == until`, calling `log` after each one.
/// Gradients of a batch are reduced in sample order, so results do not
/// depend on the thread count.
pub fn train<T: Real + Send + Sync>(
    decoder: &mut Decoder<T>,
    scenes: &[SceneSample],
    cfg: &TrainConfig,
    state: &mut TrainState<T>,
    until: u64,
    mut log: impl FnMut(&TrainLogLine) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Empty("training scenes"));
    }
    let mut cache = BTreeMap::new();
    let b = cfg.batch_size as u64;
    while state.step < until {
        let ks: Vec<u64> = (state.step * b..(state.step + 1) * b).collect();
        let picks: Vec<usize> = ks
            .iter()
            .map(|&k| scene_index(cfg.seed, k, scenes.len(), &mut cache))
            .collect();
        let dec: &Decoder<T> = decoder;
        let results: Vec<Result<SampleGrads<T>>> = ks
            .par_iter()
            .zip(&picks)
            .map(|(&k, &i)| sample_gradients(dec, &scenes[i], cfg, k))
            .collect();
        let mut sum: Option<BTreeMap<String, Tensor<T>>> = None;
        let mut parts = LossBreakdown::default();
        for r in results {
            let (g, p) = r?;
            parts.classification += p.classification;
            parts.box_l1 += p.box_l1;
            parts.uncertainty += p.uncertainty;
            parts.regression += p.regression;
            parts.total += p.total;
            match &mut sum {
                None => sum = Some(g),
                Some(acc) => {
                    for (name, t) in g {
                        acc.get_mut(&name).expect("same parameter set").add_assign(&t);
                    }
                }
            }
        }
        let mut grads = sum.expect("batch is non-empty");
        let inv = T::lit(1.0 / b as f64);
        for g in grads.values_mut() {
            g.scale_assign(inv);
        }
        let grad_norm = state.optimizer.update(&mut decoder.params, &grads)?;
        state.step += 1;
        let bf = b as f64;
        log(&TrainLogLine {
            step: state.step,
            loss: parts.total / bf,
            classification: parts.classification / bf,
            box_l1: parts.box_l1 / bf,
            uncertainty: parts.uncertainty / bf,
            regression: parts.regression / bf,
            grad_norm,
        })?;
    }
    Ok(())
}

/// Configuration stored inside a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub layout: SensorLayout,
    pub train: TrainConfig,
}

pub fn save_decoder<T: Real>(path: &Path, decoder: &Decoder<T>, state: &TrainState<T>, train: &TrainConfig) -> Result<()> {
    let meta = CheckpointMeta {
        model: decoder.model.clone(),
        layout: decoder.layout.clone(),
        train: train.clone(),
    };
    save_checkpoint(
        path,
        &Checkpoint {
            step: state.step,
            config_json: serde_json::to_string(&meta)?,
            params: decoder.params.clone(),
            momentum: state.optimizer.velocity().clone(),
        },
    )
}

/// Loads a decoder and its optimizer state (step size and momentum from the
/// stored training configuration).
pub fn load_decoder<T: Real>(path: &Path) -> Result<(Decoder<T>, TrainState<T>, CheckpointMeta)> {
    let ck = load_checkpoint::<T>(path)?;
    let meta: CheckpointMeta = serde_json::from_str(&ck.config_json).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let reference = Decoder::<T>::new(meta.model.clone(), meta.layout.clone(), 0)?;
    for (name, t) in reference.params.iter() {
        let got = ck.params.get(name)?;
        if got.shape() != t.shape() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("parameter `{}` has shape {:?}, expected {:?}", name, got.shape(), t.shape()),
            });
        }
    }
    if ck.params.len() != reference.params.len() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: "unexpected parameter set".into(),
        });
    }
    let mut optimizer = Sgd::new(meta.train.step_size, meta.train.momentum, meta.train.clip_norm);
    optimizer.set_velocity(ck.momentum);
    let decoder = Decoder {
        model: meta.model.clone(),
        layout: meta.layout.clone(),
        params: ck.params,
    };
    Ok((decoder, TrainState { step: ck.step, optimizer }, meta))
}
