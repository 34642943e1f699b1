//! The declarative run configuration and dotted-key overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backbone::ModelConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::heads::DecodeConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Manifest of the training set.
    pub train_manifest: Option<String>,
    /// Separate validation manifest; when absent every `val_every`-th
    /// training sequence is held out instead.
    pub val_manifest: Option<String>,
    pub val_every: usize,
    /// Cut sequences into clips of this many seconds before training.
    pub clip_len_s: Option<f64>,
    pub overlap: f64,
    /// Per-channel z-scoring of every sequence.
    pub normalize: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { train_manifest: None, val_manifest: None, val_every: 4, clip_len_s: None, overlap: 0.5, normalize: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: String,
    pub svg: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: "runs/default".into(), svg: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub data: DataConfig,
    pub decode: DecodeConfig,
    pub eval: EvalConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    /// Parses a JSON document, rejecting unknown keys, then validates.
    pub fn from_value(value: Value) -> Result<Self> {
        let defaults = serde_json::to_value(RunConfig::default())?;
        let mut unknown = Vec::new();
        unknown_keys(&value, &defaults, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))));
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (or starts from defaults) and applies `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => serde_json::to_value(RunConfig::default())?,
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_value(value)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.training.validate()?;
        let mut problems = Vec::new();
        if self.eval.tiou_thresholds.is_empty() || self.eval.tiou_thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
            problems.push(format!("eval.tiou_thresholds must be non-empty within [0, 1], got {:?}", self.eval.tiou_thresholds));
        }
        if !(0.0..=1.0).contains(&self.decode.nms_threshold) {
            problems.push("decode.nms_threshold must lie in [0, 1]".to_string());
        }
        if !(0.0..1.0).contains(&self.data.overlap) {
            problems.push("data.overlap must lie in [0, 1)".to_string());
        }
        if self.data.clip_len_s.is_some_and(|c| !(c > 0.0)) {
            problems.push("data.clip_len_s must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Collects dotted paths present in `value` but not in `reference`.
/// Subtrees whose reference is not an object (options, tagged enums) are
/// left to the typed parser.
fn unknown_keys(value: &Value, reference: &Value, prefix: &str, out: &mut Vec<String>) {
    let (Value::Object(v), Value::Object(r)) = (value, reference) else { return };
    for (k, child) in v {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match r.get(k) {
            None => out.push(path),
            Some(rc) if !matches!(rc, Value::Object(_)) => {}
            Some(rc) => {
                if is_tagged(rc) {
                    continue;
                }
                unknown_keys(child, rc, &path, out);
            }
        }
    }
}

fn is_tagged(v: &Value) -> bool {
    v.as_object().is_some_and(|o| o.contains_key("mode") || o.contains_key("method"))
}

/// `a.b.c=value`; the value is parsed as JSON when possible, else taken as a string.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{spec}' is not of the form key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("malformed override key '{key}'")));
    }
    let parsed = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = match node {
            Value::Object(m) => m,
            other => {
                *other = Value::Object(Default::default());
                other.as_object_mut().expect("object")
            }
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}
