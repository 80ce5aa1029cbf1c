//! Run configuration: a JSON file, a preset, then command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tpl_core::harness::TrainConfig;

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub data: Option<PathBuf>,
    pub backbone: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub target_domain: Option<u16>,
    pub train: TrainConfig,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// Desk-scale defaults.
    #[default]
    Default,
    /// Compact model, short schedules.
    Quick,
}

impl Preset {
    fn base(self) -> CliConfig {
        let train = match self {
            Preset::Default => TrainConfig::default(),
            Preset::Quick => TrainConfig::quick(),
        };
        CliConfig { train, ..CliConfig::default() }
    }
}

/// Recursively overlays `top` onto `base`; keys missing from `base` are kept
/// so that deserialization can reject them.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

/// Applies `key.path=value`; the value is JSON when it parses, a string otherwise.
pub fn apply_set(doc: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::usage(format!("--set expects key=value, got '{assignment}'")))?;
    let pointer = format!("/{}", key.trim().replace('.', "/"));
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    match doc.pointer_mut(&pointer) {
        Some(slot) => {
            *slot = value;
            Ok(())
        }
        None => Err(CliError::usage(format!("--set: unknown key '{key}'"))),
    }
}

/// Layers: preset, then `--config`, then `--set`, then typed flags.
pub struct Resolver {
    doc: Value,
}

impl Resolver {
    pub fn new(preset: Preset, file: Option<&Path>, sets: &[String]) -> Result<Self, CliError> {
        let mut doc = serde_json::to_value(preset.base()).map_err(CliError::internal)?;
        if let Some(p) = file {
            let text = fs::read_to_string(p).map_err(|e| CliError::data(format!("{}: {e}", p.display())))?;
            let v: Value = serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", p.display())))?;
            if !v.is_object() {
                return Err(CliError::data(format!("{}: config must be a JSON object", p.display())));
            }
            merge(&mut doc, v);
        }
        for s in sets {
            apply_set(&mut doc, s)?;
        }
        Ok(Self { doc })
    }

    pub fn set<T: Serialize>(&mut self, key: &str, value: Option<T>) -> Result<(), CliError> {
        if let Some(v) = value {
            let v = serde_json::to_value(v).map_err(CliError::internal)?;
            let pointer = format!("/{}", key.replace('.', "/"));
            *self.doc.pointer_mut(&pointer).ok_or_else(|| CliError::internal(format!("no key {key}")))? = v;
        }
        Ok(())
    }

    pub fn finish(self) -> Result<CliConfig, CliError> {
        let cfg: CliConfig = serde_json::from_value(self.doc).map_err(|e| CliError::usage(format!("config: {e}")))?;
        cfg.train.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layers_apply_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"train": {"lr": 0.01, "iterations": 7}, "target_domain": 2}"#).unwrap();
        assert!(Resolver::new(Preset::Quick, Some(&p), &["train.model.depth_hint=3".into()]).is_err());
        let sets = ["train.theta=1250".into(), "train.strategy=joint".into(), "train.iterations=5".into()];
        let mut r = Resolver::new(Preset::Quick, Some(&p), &sets).unwrap();
        r.set("train.iterations", Some(9usize)).unwrap();
        let c = r.finish().unwrap();
        assert_eq!(c.train.lr, 0.01);
        assert_eq!(c.train.iterations, 9);
        assert_eq!(c.target_domain, Some(2));
        assert_eq!(c.train.theta, tpl_core::harness::Theta::Fixed(1250.0));
        assert_eq!(c.train.model, TrainConfig::quick().model);
    }

    #[test]
    fn unknown_file_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"train": {"lr": 0.01, "learning_rate": 1}}"#).unwrap();
        let err = Resolver::new(Preset::Default, Some(&p), &[]).unwrap().finish().unwrap_err();
        assert_eq!(err.code, 1);
    }

    #[test]
    fn echo_roundtrips() {
        let c = Resolver::new(Preset::Quick, None, &[]).unwrap().finish().unwrap();
        let s = serde_json::to_string_pretty(&c).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, s).unwrap();
        let again = Resolver::new(Preset::Default, Some(&p), &[]).unwrap().finish().unwrap();
        assert_eq!(again, c);
    }
}
