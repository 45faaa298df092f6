//! Layered run configuration: built-in defaults, then `RLSUM_SEED`, then the
//! config file, then command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use rlsum_core::analysis::{ReportFormat, DEFAULT_ALPHA, DEFAULT_BUCKET_EDGES, DEFAULT_RESAMPLES};
use rlsum_core::data::{SplitFractions, DEFAULT_MAX_SOURCE_TOKENS, DEFAULT_MAX_TARGET_TOKENS};
use rlsum_core::training::{TrainConfig, GAMMA_GRID};
use rlsum_core::{Error, Result};

pub const SEED_ENV: &str = "RLSUM_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    /// Abort on the first malformed line instead of skipping it.
    pub strict: bool,
    pub split: SplitFractions,
    /// Kept apart from the training seed so every run sees the same split.
    pub split_seed: u64,
    pub max_vocab: usize,
    pub max_source_tokens: usize,
    pub max_target_tokens: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            strict: false,
            split: SplitFractions::default(),
            split_seed: 0,
            max_vocab: 5000,
            max_source_tokens: DEFAULT_MAX_SOURCE_TOKENS,
            max_target_tokens: DEFAULT_MAX_TARGET_TOKENS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { hidden: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub grid: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            grid: GAMMA_GRID.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub resamples: usize,
    pub alpha: f64,
    pub bucket_edges: Vec<usize>,
    pub baseline: String,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            resamples: DEFAULT_RESAMPLES,
            alpha: DEFAULT_ALPHA,
            bucket_edges: DEFAULT_BUCKET_EDGES.to_vec(),
            baseline: "nll".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
    pub analysis: AnalysisConfig,
    pub format: ReportFormat,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            sweep: SweepConfig::default(),
            analysis: AnalysisConfig::default(),
            format: ReportFormat::Csv,
        }
    }
}

fn config_error(key: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        message: message.into(),
    }
}

/// Recursively overlays `top` onto `base`; objects merge, anything else replaces.
pub fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Sets a dotted key such as `train.gamma`, creating objects on the way.
pub fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_error(key, "malformed key"));
    }
    for (i, part) in parts.iter().enumerate() {
        if !cur.is_object() {
            return Err(config_error(key, format!("`{}` is not an object", parts[..i].join("."))));
        }
        let obj = cur.as_object_mut().expect("checked above");
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    unreachable!("loop returns on the last part")
}

/// `key=value`, with the value read as JSON when it parses and as a string otherwise.
pub fn parse_override(raw: &str) -> Result<(String, Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| config_error(raw, "override must look like key=value"))?;
    let value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
    Ok((key.trim().to_string(), value))
}

pub fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.into(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Typed view of a merged JSON value; errors name the offending key.
pub fn from_value<T: serde::de::DeserializeOwned>(value: Value) -> Result<T> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let key = e.path().to_string();
        config_error(if key == "." { "<root>".to_string() } else { key }, e.into_inner().to_string())
    })
}

/// The layered value before typing: `defaults`, the seed env var (written
/// to `seed_key`), the file, then `overrides` in order.
pub fn layered(
    defaults: Value,
    seed_key: &str,
    config_path: Option<&Path>,
    overrides: &[(String, Value)],
) -> Result<Value> {
    let mut value = defaults;
    if let Ok(raw) = std::env::var(SEED_ENV) {
        let seed: u64 = raw
            .trim()
            .parse()
            .map_err(|_| config_error(SEED_ENV, format!("expected an unsigned integer, got `{raw}`")))?;
        set_path(&mut value, seed_key, seed.into())?;
    }
    if let Some(path) = config_path {
        let file = read_json(path)?;
        if !file.is_object() {
            return Err(config_error("<root>", format!("{} must hold a JSON object", path.display())));
        }
        merge(&mut value, file);
    }
    for (key, v) in overrides {
        set_path(&mut value, key, v.clone())?;
    }
    Ok(value)
}

pub fn resolve(defaults: &RunConfig, config_path: Option<&Path>, overrides: &[(String, Value)]) -> Result<RunConfig> {
    let defaults = serde_json::to_value(defaults).expect("defaults serialize");
    let cfg: RunConfig = from_value(layered(defaults, "train.seed", config_path, overrides)?)?;
    cfg.train.validate().map_err(|e| match e {
        Error::Config { key, message } => config_error(format!("train.{key}"), message),
        other => other,
    })?;
    Ok(cfg)
}

pub fn write_resolved(dir: &Path, value: &impl Serialize) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("config_resolved.json");
    let mut text = serde_json::to_string_pretty(value).expect("config serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}
