//! Run configuration: one JSON document with a strict schema, overridable
//! leaf by leaf through dotted paths.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::decoder::{ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::scenesim::{ScenarioKind, ScenarioSpec, SensorLayout, SimConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            kind: ScenarioKind::Clean,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn spec(&self) -> ScenarioSpec {
        ScenarioSpec::new(self.kind.clone(), self.seed)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Checkpoint to continue training from.
    pub resume: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Dataset seed.
    pub seed: u64,
    pub sensors: SensorLayout,
    pub sim: SimConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub scenario: ScenarioConfig,
    pub io: IoConfig,
}

fn section(key: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Config { .. } => e,
        other => Error::config(key, other.to_string()),
    }
}

impl RunConfig {
    /// Parses a JSON document, applies `key=value` overrides and validates.
    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self> {
        let mut root: Value = if text.trim().is_empty() {
            Value::Object(Default::default())
        } else {
            serde_json::from_str(text).map_err(|e| Error::config("<root>", e.to_string()))?
        };
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::config(o.clone(), "override must look like key=value"))?;
            set_path(&mut root, key, parse_leaf(raw))?;
        }
        let cfg: RunConfig = serde_path_to_error::deserialize(root).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::config(p.display().to_string(), e.to_string()))?,
            None => String::new(),
        };
        Self::from_json(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.sensors.validate().map_err(section("sensors"))?;
        self.sim.validate(&self.sensors).map_err(section("sim"))?;
        self.model.validate().map_err(section("model"))?;
        self.train.validate().map_err(section("train"))?;
        self.eval.validate().map_err(section("eval"))?;
        self.scenario.spec().validate().map_err(section("scenario"))?;
        if matches!(self.scenario.kind, ScenarioKind::Stuck { .. }) && self.sensors.num_frames < 2 {
            return Err(Error::config("scenario.kind", "the stuck scenario needs sensors.num_frames >= 2"));
        }
        Ok(())
    }

    /// Hash of everything that determines the generated dataset.
    pub fn dataset_hash(&self) -> String {
        let doc = serde_json::json!({
            "seed": self.seed,
            "sensors": self.sensors,
            "sim": self.sim,
        });
        hex(&Sha256::digest(doc.to_string().as_bytes()))
    }

    /// Hash of the whole configuration except the io section.
    pub fn config_hash(&self) -> String {
        let mut doc = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(m) = &mut doc {
            m.remove("io");
        }
        hex(&Sha256::digest(doc.to_string().as_bytes()))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{:02x}", b)).collect()
}

/// Values are read as JSON when they parse, as plain strings otherwise.
fn parse_leaf(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(key, "empty path segment"));
    }
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let map = node
            .as_object_mut()
            .ok_or_else(|| Error::config(parts[..i].join("."), "not a section"))?;
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("path has at least one segment")
}

/// Version string embedded in every report.
pub fn version_string() -> String {
    match option_env!("SPARSELIF_GIT_DESCRIBE") {
        Some(d) => d.to_string(),
        None => format!("v{}", env!("CARGO_PKG_VERSION")),
    }
}
