//! Run configuration: one JSON document composing every component's settings.
//!
//! Keys missing from the file take their defaults; unknown keys are rejected
//! with their full dotted path. Overrides (`key.path=value`) are applied on
//! top of the file before validation.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::data::{stratified_kfold, DatasetManifest, FoldSplit};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{ModelConfig, ModelParams};
use crate::seed::derive_seed;
use crate::train::TrainConfig;

const SPLIT_STREAM: u64 = 1;
const INIT_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset manifest; relative paths resolve against the working directory.
    pub manifest: Option<String>,
    pub folds: usize,
    /// Share of each fold's non-test pool held out for early stopping.
    pub val_fraction: f64,
    /// Interpret all test subjects instead of patients only.
    pub include_controls: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            folds: 5,
            val_fraction: 0.25,
            include_controls: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub data: DataConfig,
    /// Output root; a timestamped run directory is created beneath it.
    pub out: Option<String>,
    pub seed: u64,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        if self.data.folds < 2 {
            return Err(Error::InvalidValue {
                key: "data.folds".into(),
                msg: "need at least 2 folds".into(),
            });
        }
        if !(self.data.val_fraction > 0.0 && self.data.val_fraction < 1.0) {
            return Err(Error::InvalidValue {
                key: "data.val_fraction".into(),
                msg: "must lie in (0, 1)".into(),
            });
        }
        Ok(())
    }

    /// Cross-validation folds of `ds` for this run's seed.
    pub fn folds(&self, ds: &DatasetManifest) -> Result<Vec<FoldSplit>> {
        stratified_kfold(
            ds,
            self.data.folds,
            self.data.val_fraction,
            derive_seed(self.seed, &[SPLIT_STREAM]),
        )
    }

    /// Fresh parameters for one fold's model.
    pub fn init_params(&self, fold: usize) -> ModelParams {
        ModelParams::init(&self.model, derive_seed(self.seed, &[INIT_STREAM, fold as u64]))
    }

    /// Effective configuration as pretty JSON.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes")
    }
}

/// Walks `given` against the key tree of `reference`, returning the first
/// key present in `given` but absent from the reference.
fn find_unknown(given: &Value, reference: &Value, prefix: &str) -> Option<String> {
    let (Value::Object(g), Value::Object(r)) = (given, reference) else {
        return None;
    };
    for (k, v) in g {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match r.get(k) {
            None => return Some(path),
            Some(rv) => {
                if let Some(bad) = find_unknown(v, rv, &path) {
                    return Some(bad);
                }
            }
        }
    }
    None
}

fn reference_tree() -> Value {
    serde_json::to_value(RunConfig::default()).expect("run config serializes")
}

/// Applies `key.path=value`. The value is read as JSON when it parses,
/// otherwise as a bare string.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| Error::InvalidValue {
        key: assignment.to_string(),
        msg: "override must look like key=value".into(),
    })?;
    let key = key.trim();
    let reference = reference_tree();
    let mut node = &reference;
    for part in key.split('.') {
        node = node
            .get(part)
            .ok_or_else(|| Error::UnknownKey(key.to_string()))?;
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.to_string()));

    let parts: Vec<&str> = key.split('.').collect();
    let mut target = doc;
    for part in &parts[..parts.len() - 1] {
        if !target.is_object() {
            *target = Value::Object(Map::new());
        }
        target = target
            .as_object_mut()
            .unwrap()
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    if !target.is_object() {
        *target = Value::Object(Map::new());
    }
    target
        .as_object_mut()
        .unwrap()
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Builds a config from file text (empty means all defaults) plus overrides.
pub fn parse_config_str(text: &str, overrides: &[String]) -> Result<RunConfig> {
    let mut doc: Value = if text.trim().is_empty() {
        Value::Object(Map::new())
    } else {
        serde_json::from_str(text).map_err(|e| Error::InvalidValue {
            key: "<config>".into(),
            msg: e.to_string(),
        })?
    };
    if !doc.is_object() {
        return Err(Error::InvalidValue {
            key: "<config>".into(),
            msg: "top level must be an object".into(),
        });
    }
    if let Some(key) = find_unknown(&doc, &reference_tree(), "") {
        return Err(Error::UnknownKey(key));
    }
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let cfg: RunConfig = serde_path_to_error::deserialize(doc).map_err(|e| Error::InvalidValue {
        key: e.path().to_string(),
        msg: e.inner().to_string(),
    })?;
    let mut cfg = cfg;
    cfg.train.seed = cfg.seed;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        None => String::new(),
    };
    parse_config_str(&text, overrides)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = parse_config_str("", &[]).unwrap();
        assert_eq!(c.train.lr, 1e-4);
        assert_eq!(c.model.k, 8);
        assert_eq!(c.model.d, 384);
        assert_eq!(c.loss.tau, 2.0);
        assert_eq!(c.loss.alpha, 1.3);
        assert_eq!(c, parse_config_str("{}", &[]).unwrap());
    }

    #[test]
    fn override_beats_file() {
        let c = parse_config_str(r#"{"train": {"lr": 1e-4}}"#, &["train.lr=1e-3".into()]).unwrap();
        assert_eq!(c.train.lr, 1e-3);
    }

    #[test]
    fn unknown_keys_carry_their_path() {
        assert!(matches!(
            parse_config_str(r#"{"karma": 5}"#, &[]),
            Err(Error::UnknownKey(k)) if k == "karma"
        ));
        assert!(matches!(
            parse_config_str(r#"{"model": {"karma": 5}}"#, &[]),
            Err(Error::UnknownKey(k)) if k == "model.karma"
        ));
        assert!(matches!(
            parse_config_str("", &["train.karma=1".into()]),
            Err(Error::UnknownKey(k)) if k == "train.karma"
        ));
    }

    #[test]
    fn bad_values_name_their_key() {
        assert!(matches!(
            parse_config_str(r#"{"model": {"d": "wide"}}"#, &[]),
            Err(Error::InvalidValue { key, .. }) if key == "model.d"
        ));
        assert!(matches!(
            parse_config_str("", &["model.heads=5".into()]),
            Err(Error::InvalidValue { .. })
        ));
    }

    #[test]
    fn seed_flows_to_training_and_round_trips() {
        let c = parse_config_str(r#"{"seed": 42}"#, &["grad_clip_norm=1".into()]);
        assert!(matches!(c, Err(Error::UnknownKey(_))));
        let c = parse_config_str(r#"{"seed": 42}"#, &["train.grad_clip_norm=1.5".into()]).unwrap();
        assert_eq!(c.train.seed, 42);
        assert_eq!(c.train.grad_clip_norm, Some(1.5));
        assert_eq!(parse_config_str(&c.to_json(), &[]).unwrap(), c);
    }
}
