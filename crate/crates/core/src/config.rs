//! Run configuration and its flat `key = value` text form.
//!
//! Keys are dotted paths into [`RunConfig`] (`model.backbone.stage_depths`).
//! A key may drop middle segments when the result is unambiguous, so
//! `model.stage_depths` resolves to `model.backbone.stage_depths`. Lists are
//! comma separated.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{Blend, Split};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::{DataConfig, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictConfig {
    pub overlap: usize,
    pub blend: Blend,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self {
            overlap: 64,
            blend: Blend::Average,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub split: Split,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: Split::Val,
            batch_size: 8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileConfig {
    /// Square input side.
    pub input_size: usize,
    pub batch: usize,
    pub warmup: usize,
    /// Timed forward passes; 0 skips the FPS measurement.
    pub iters: usize,
    /// Bytes per stored parameter for the size column.
    pub element_bytes: usize,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            input_size: 512,
            batch: 1,
            warmup: 1,
            iters: 3,
            element_bytes: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub predict: PredictConfig,
    pub profile: ProfileConfig,
}

impl RunConfig {
    pub fn with_preset(name: &str) -> Result<Self> {
        Ok(Self {
            model: ModelConfig::preset(name)?,
            train: TrainConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            predict: PredictConfig::default(),
            profile: ProfileConfig::default(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        if self.eval.batch_size == 0 || self.profile.batch == 0 || self.profile.input_size == 0 {
            return Err(Error::Config("batch sizes and input_size must be > 0".into()));
        }
        Ok(())
    }

    /// Every key with its current value, sorted by key.
    pub fn to_pairs(&self) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        flatten("", &serde_json::to_value(self)?, &mut out);
        Ok(out)
    }

    /// The effective configuration as `key = value` lines.
    pub fn to_text(&self) -> Result<String> {
        Ok(self
            .to_pairs()?
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect())
    }

    /// Applies `key = value` assignments in order.
    pub fn apply<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        let mut tree = serde_json::to_value(&*self)?;
        let keys: Vec<String> = {
            let mut m = BTreeMap::new();
            flatten("", &tree, &mut m);
            m.into_keys().collect()
        };
        for (key, raw) in pairs {
            let full = resolve_key(&keys, key.trim())?;
            let slot = full
                .split('.')
                .try_fold(&mut tree, |v, seg| v.get_mut(seg))
                .expect("resolved keys exist");
            *slot = parse_like(slot, raw.trim())
                .map_err(|why| Error::Config(format!("bad value `{}` for {full}: {why}", raw.trim())))?;
        }
        *self = serde_json::from_value(tree)
            .map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
        Ok(())
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, String>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        leaf => {
            out.insert(prefix.to_string(), render(leaf));
        }
    }
}

fn render(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Array(items) => items.iter().map(render).collect::<Vec<_>>().join(","),
        other => other.to_string(),
    }
}

fn resolve_key(keys: &[String], key: &str) -> Result<String> {
    if keys.iter().any(|k| k == key) {
        return Ok(key.to_string());
    }
    let (head, rest) = key
        .split_once('.')
        .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
    let suffix = format!(".{rest}");
    let hits: Vec<&String> = keys
        .iter()
        .filter(|k| k.split('.').next() == Some(head) && k.ends_with(&suffix))
        .collect();
    match hits.as_slice() {
        [one] => Ok((*one).clone()),
        [] => Err(Error::Config(format!("unknown config key `{key}`"))),
        many => Err(Error::Config(format!(
            "ambiguous config key `{key}`: {}",
            many.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
        ))),
    }
}

/// Parses `raw` into a value of the same JSON kind as `like`.
fn parse_like(like: &Value, raw: &str) -> std::result::Result<Value, String> {
    match like {
        Value::Bool(_) => raw.parse::<bool>().map(Value::Bool).map_err(|e| e.to_string()),
        Value::Number(n) if n.is_u64() => raw.parse::<u64>().map(Value::from).map_err(|e| e.to_string()),
        Value::Number(_) => {
            let f = raw.parse::<f64>().map_err(|e| e.to_string())?;
            serde_json::Number::from_f64(f)
                .map(Value::Number)
                .ok_or_else(|| "not a finite number".to_string())
        }
        Value::String(_) => Ok(Value::String(raw.to_string())),
        Value::Array(items) => {
            if raw.is_empty() {
                return Ok(Value::Array(Vec::new()));
            }
            let proto = items.first().cloned().unwrap_or(Value::from(0u64));
            raw.split(',')
                .map(|s| parse_like(&proto, s.trim()))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(Value::Array)
        }
        Value::Null | Value::Object(_) => Err("key does not hold a scalar".into()),
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Parses one `key=value` command-line override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// Builds the effective configuration: preset defaults, then the file, then
/// overrides. The preset comes from `preset` if given, else from the file's
/// `preset` key, else `base`.
pub fn build(preset: Option<&str>, file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let file_pairs = match file {
        Some(p) => parse_pairs(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => Vec::new(),
    };
    let file_preset = file_pairs.iter().rev().find(|(k, _)| k == "preset").map(|(_, v)| v.as_str());
    let mut cfg = RunConfig::with_preset(preset.or(file_preset).unwrap_or("base"))?;
    let assignments = file_pairs
        .iter()
        .chain(overrides)
        .filter(|(k, _)| k != "preset")
        .map(|(k, v)| (k.as_str(), v.as_str()));
    cfg.apply(assignments)?;
    cfg.validate()?;
    Ok(cfg)
}
