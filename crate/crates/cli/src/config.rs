//! Run configuration: JSON file loading plus dotted-path `--set`
//! overrides applied before deserialization.

use std::fs;
use std::path::Path;

use asmloc_core::data::SyntheticConfig;
use asmloc_core::eval::EvalConfig;
use asmloc_core::model::ModelConfig;
use asmloc_core::optim::AdamConfig;
use asmloc_core::train::RefinementSchedule;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub adam: AdamConfig,
    pub schedule: RefinementSchedule,
    pub eval: EvalConfig,
    pub synthetic: SyntheticConfig,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synthetic = SyntheticConfig::default();
        let mut model = ModelConfig::new(synthetic.num_classes, synthetic.feature_dim);
        // default embedding width compatible with the 8-head attention
        model.embed_dim = 16;
        RunConfig {
            model,
            adam: AdamConfig::default(),
            schedule: RefinementSchedule::default(),
            eval: EvalConfig::thumos(),
            synthetic,
            seed: 7,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        self.eval.validate()?;
        self.synthetic.validate()?;
        if self.model.num_classes != self.synthetic.num_classes
            || self.model.feature_dim != self.synthetic.feature_dim
        {
            return Err(CliError::Config(format!(
                "model expects C={}, D={} but the synthetic section declares C={}, D={}",
                self.model.num_classes,
                self.model.feature_dim,
                self.synthetic.num_classes,
                self.synthetic.feature_dim
            )));
        }
        Ok(())
    }
}

/// Set a dotted path inside a JSON tree, creating objects along the way.
fn set_path(root: &mut serde_json::Value, path: &str, value: serde_json::Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(CliError::Config(format!("empty segment in key '{path}'")));
        }
        if i + 1 == parts.len() {
            match node {
                serde_json::Value::Object(map) => {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                _ => {
                    return Err(CliError::Config(format!(
                        "'{}' is not an object in key '{path}'",
                        parts[..i].join(".")
                    )))
                }
            }
        }
        node = match node {
            serde_json::Value::Object(map) => map
                .entry(part.to_string())
                .or_insert_with(|| serde_json::Value::Object(Default::default())),
            _ => {
                return Err(CliError::Config(format!(
                    "'{}' is not an object in key '{path}'",
                    parts[..i].join(".")
                )))
            }
        };
    }
    unreachable!("split never yields zero parts");
}

/// Load the run configuration: defaults, then the optional file, then the
/// `key.path=value` overrides. Override values parse as JSON and fall back
/// to plain strings.
pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut tree = match file {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            let file_tree: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| CliError::format(path, format!("invalid JSON: {e}")))?;
            // file values override the defaults section by section
            let mut base = serde_json::to_value(RunConfig::default())
                .expect("default config serializes");
            merge(&mut base, file_tree);
            base
        }
        None => serde_json::to_value(RunConfig::default()).expect("default config serializes"),
    };

    for entry in overrides {
        let (key, raw) = entry
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override '{entry}' is not key=value")))?;
        let value = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        set_path(&mut tree, key, value)?;
    }

    let cfg: RunConfig = serde_json::from_value(tree)
        .map_err(|e| CliError::Config(format!("invalid configuration: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Recursively overlay `incoming` onto `base` (objects merge, everything
/// else replaces).
fn merge(base: &mut serde_json::Value, incoming: serde_json::Value) {
    match (base, incoming) {
        (serde_json::Value::Object(b), serde_json::Value::Object(inc)) => {
            for (k, v) in inc {
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = load(
            None,
            &[
                "model.gamma=4.5".into(),
                "seed=99".into(),
                "schedule.base_epochs=3".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.model.gamma, 4.5);
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.schedule.base_epochs, 3);
    }

    #[test]
    fn bad_override_syntax_is_config_error() {
        assert!(matches!(
            load(None, &["model.gamma".into()]),
            Err(CliError::Config(_))
        ));
    }

    #[test]
    fn invalid_value_fails_validation() {
        // even kernel width is rejected by the model validator
        assert!(load(None, &["model.kernel_width=2".into()]).is_err());
    }

    #[test]
    fn partial_file_keeps_defaults_elsewhere() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"model": {"gamma": 3.0}, "seed": 5}"#).unwrap();
        let cfg = load(Some(&path), &[]).unwrap();
        assert_eq!(cfg.model.gamma, 3.0);
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.model.alpha, 0.7); // untouched default
    }

    #[test]
    fn overrides_beat_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"seed": 5}"#).unwrap();
        let cfg = load(Some(&path), &["seed=11".into()]).unwrap();
        assert_eq!(cfg.seed, 11);
    }
}
