//! Merging of `--config` JSON files with command-line flags.
//!
//! A config file is a JSON object. Keys at the top level apply to every
//! command; an object under a command's name (e.g. `"train": {...}`) applies
//! to that command only. Flags given on the command line win. Boolean flags
//! can only switch a setting on.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{CliError, Result};

pub const COMMANDS: [&str; 9] = [
    "build-vocab",
    "gen-synth",
    "train",
    "sample",
    "evaluate",
    "predict",
    "encode",
    "decode",
    "roundtrip-check",
];

fn key(k: &str) -> String {
    k.replace('-', "_")
}

fn object<T: Serialize>(v: &T) -> Result<Map<String, Value>> {
    match serde_json::to_value(v).map_err(|e| CliError::Internal(e.to_string()))? {
        Value::Object(m) => Ok(m),
        _ => Err(CliError::Internal("settings must serialize to an object".into())),
    }
}

/// Merges `defaults`, then the config file, then `flags`.
pub fn resolve<T: Serialize + DeserializeOwned>(command: &str, config: Option<&Path>, flags: &T, defaults: &T) -> Result<T> {
    let mut merged: Map<String, Value> = object(defaults)?.into_iter().filter(|(_, v)| !v.is_null()).collect();
    if let Some(path) = config {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        let file: Value = serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        let Value::Object(obj) = file else {
            return Err(CliError::Usage(format!("config {} must hold a JSON object", path.display())));
        };
        for (k, v) in &obj {
            if !COMMANDS.contains(&k.as_str()) {
                merged.insert(key(k), v.clone());
            }
        }
        if let Some(Value::Object(section)) = obj.get(command) {
            for (k, v) in section {
                merged.insert(key(k), v.clone());
            }
        }
    }
    let flag_map = object(flags)?;
    let known: Vec<String> = flag_map.keys().cloned().collect();
    if let Some(unknown) = merged.keys().find(|k| !known.contains(k)) {
        return Err(CliError::Usage(format!("unknown setting `{unknown}` for {command}")));
    }
    for (k, v) in flag_map {
        match v {
            Value::Null | Value::Bool(false) => {
                merged.entry(k).or_insert(v);
            }
            Value::Array(ref a) if a.is_empty() => {
                merged.entry(k).or_insert(v);
            }
            _ => {
                merged.insert(k, v);
            }
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::Usage(format!("config for {command}: {e}")))
}

pub(crate) fn required<T: Clone>(v: &Option<T>, name: &str) -> Result<T> {
    v.clone().ok_or_else(|| CliError::Usage(format!("missing required setting --{}", name.replace('_', "-"))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Serialize, Deserialize, Default, Debug, PartialEq)]
    struct S {
        epochs: Option<usize>,
        lr: Option<f64>,
        legacy_arch: bool,
        seed: Option<u64>,
    }

    #[test]
    fn flags_override_file_sections() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"seed": 4, "lr": 0.5, "train": {"epochs": 3, "legacy-arch": true}, "sample": {"k": 5}}"#).unwrap();
        let flags = S {
            lr: Some(0.1),
            ..S::default()
        };
        let defaults = S {
            epochs: Some(20),
            seed: Some(0),
            ..S::default()
        };
        let r = resolve("train", Some(&p), &flags, &defaults).unwrap();
        assert_eq!(
            r,
            S {
                epochs: Some(3),
                lr: Some(0.1),
                legacy_arch: true,
                seed: Some(4)
            }
        );
        std::fs::write(&p, r#"{"epoch": 3}"#).unwrap();
        assert!(matches!(resolve("train", Some(&p), &flags, &defaults), Err(CliError::Usage(_))));
        let plain = resolve("train", None, &flags, &defaults).unwrap();
        assert_eq!((plain.epochs, plain.lr, plain.seed), (Some(20), Some(0.1), Some(0)));
    }
}
