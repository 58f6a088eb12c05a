//! Run configuration shared by every command.
//!
//! Everything is addressable by a dotted key (`train.batch_size`,
//! `model.encoder.model_dim`). Config files are JSON objects of dotted keys;
//! nested objects are accepted too and flattened.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::evaluation::ProbeConfig;
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

pub const SEED_ENV: &str = "DEFEND_SEED";
pub const DEFAULT_PRESET: &str = "desk-full";
pub const DEFAULT_SEED: u64 = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: String,
    /// Master seed; copied into `train.seed`, `data.seed` and `probe.seed`
    /// unless those are set explicitly.
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub probe: ProbeConfig,
    /// Stop training after this many optimizer steps in total.
    pub max_steps: Option<usize>,
    /// Extra checkpoint every N steps; 0 keeps only phase boundaries.
    pub checkpoint_every: usize,
    /// Minimum token count for the vocabulary.
    pub min_freq: usize,
}

impl RunConfig {
    pub fn with_preset(preset: &str) -> Result<Self> {
        Ok(Self {
            preset: preset.to_string(),
            seed: DEFAULT_SEED,
            model: ModelConfig::default(),
            train: TrainConfig::preset(preset)?,
            data: DataConfig::default(),
            probe: ProbeConfig::default(),
            max_steps: None,
            checkpoint_every: 0,
            min_freq: 1,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate(self.model.encoder.patch_size)?;
        if self.data.image_size != self.model.encoder.image_size {
            return Err(Error::Config(format!(
                "data.image_size ({}) and model.encoder.image_size ({}) differ",
                self.data.image_size, self.model.encoder.image_size
            )));
        }
        if self.min_freq == 0 {
            return Err(Error::Config("min_freq must be at least 1".into()));
        }
        if self.probe.epochs == 0 || !(self.probe.lr > 0.0) {
            return Err(Error::Config("probe.epochs and probe.lr must be positive".into()));
        }
        Ok(())
    }

    /// Dotted key to leaf value.
    pub fn flatten(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        flatten_into("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("resolved_config.json"), self.to_json_pretty() + "\n")?;
        Ok(())
    }

    pub fn read_resolved(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

fn flatten_into(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) if !m.is_empty() => {
            for (k, v) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_into(&key, v, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

/// `key=value`; the value is parsed as JSON and falls back to a plain string.
pub fn parse_assignment(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("expected key=value, got {s:?}")))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(Error::Config(format!("empty key in {s:?}")));
    }
    let v = v.trim();
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.to_string(), value))
}

/// Reads a config file into dotted assignments, in key order.
pub fn read_config_file(path: &Path) -> Result<Vec<(String, Value)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
    if !v.is_object() {
        return Err(Error::Config(format!("config {} must be a JSON object", path.display())));
    }
    let mut flat = BTreeMap::new();
    flatten_into("", &v, &mut flat);
    Ok(flat.into_iter().collect())
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        let slot = obj.get_mut(*p).ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        if i + 1 == parts.len() {
            if slot.is_object() {
                return Err(Error::Config(format!("config key {key:?} is a section, set one of its fields")));
            }
            *slot = value;
            return Ok(());
        }
        cur = slot;
    }
    unreachable!("split yields at least one part")
}

/// Where each setting came from, lowest precedence first.
#[derive(Debug, Clone, Default)]
pub struct Sources {
    pub preset: Option<String>,
    pub file: Vec<(String, Value)>,
    pub sets: Vec<(String, Value)>,
    pub seed_flag: Option<u64>,
    /// Raw value of the seed environment variable.
    pub seed_env: Option<String>,
}

impl Sources {
    pub fn with_env(mut self) -> Self {
        self.seed_env = std::env::var(SEED_ENV).ok();
        self
    }
}

/// Builds the effective configuration. Seed precedence is the `--seed` flag,
/// then the environment, then the config itself.
pub fn resolve(src: &Sources) -> Result<RunConfig> {
    let assigned = src.file.iter().chain(&src.sets);
    let preset = match &src.preset {
        Some(p) => p.clone(),
        None => match assigned.clone().rfind(|(k, _)| k == "preset") {
            Some((_, Value::String(p))) => p.clone(),
            Some((_, v)) => return Err(Error::Config(format!("preset must be a string, got {v}"))),
            None => DEFAULT_PRESET.to_string(),
        },
    };
    let mut v = serde_json::to_value(RunConfig::with_preset(&preset)?)?;
    let mut touched = BTreeSet::new();
    for (k, val) in assigned {
        if k == "preset" {
            continue;
        }
        set_path(&mut v, k, val.clone())?;
        touched.insert(k.as_str());
    }
    let mut cfg: RunConfig = serde_json::from_value(v).map_err(|e| Error::Config(format!("bad config value: {e}")))?;

    let env_seed = match &src.seed_env {
        Some(s) if !s.trim().is_empty() => Some(
            s.trim()
                .parse::<u64>()
                .map_err(|_| Error::Config(format!("{SEED_ENV} must be a non-negative integer, got {s:?}")))?,
        ),
        _ => None,
    };
    if let Some(s) = src.seed_flag.or(env_seed) {
        cfg.seed = s;
    }
    if !touched.contains("train.seed") {
        cfg.train.seed = cfg.seed;
    }
    if !touched.contains("data.seed") {
        cfg.data.seed = cfg.seed;
    }
    if !touched.contains("probe.seed") {
        cfg.probe.seed = cfg.seed;
    }
    // Image size lives in two places; a single override carries over.
    match (touched.contains("data.image_size"), touched.contains("model.encoder.image_size")) {
        (true, false) => cfg.model.encoder.image_size = cfg.data.image_size,
        (false, true) => cfg.data.image_size = cfg.model.encoder.image_size,
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Turns `--set` strings into assignments.
pub fn parse_sets(items: &[String]) -> Result<Vec<(String, Value)>> {
    items.iter().map(|s| parse_assignment(s)).collect()
}

/// Resolved configuration as a flat JSON object, handy for logs.
pub fn flat_json(cfg: &RunConfig) -> Value {
    Value::Object(cfg.flatten().into_iter().collect::<Map<_, _>>())
}
