use std::fs;
use std::path::{Path, PathBuf};

use mscn_core::data::SyntheticSpec;
use mscn_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

/// Everything one invocation needs, as a single JSON document.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synthetic: SyntheticSpec,
    pub train: TrainConfig,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Reads `path` (or starts from defaults), applies `key=value`
    /// overrides, then deserializes strictly.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut doc = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::usage(format!("config {} is not valid JSON: {e}", p.display())))?
            }
            None => Value::Object(Map::new()),
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        serde_path_to_error::deserialize(doc).map_err(|e| {
            let path = e.path().to_string();
            CliError::usage(format!("config error at `{path}`: {}", e.into_inner()))
        })
    }
}

/// Sets a dotted key. The value is parsed as JSON, falling back to a plain
/// string, so `--set train.seed=3` and `--set data_dir=out/data` both work.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::usage(format!("override `{assignment}` is not key=value")))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::usage(format!("override key `{key}` is malformed")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = match node {
            Value::Object(m) => m,
            _ => {
                return Err(CliError::usage(format!(
                    "override `{key}`: `{}` is not an object",
                    parts[..i].join(".")
                )))
            }
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    unreachable!("split always yields at least one part")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_published_settings() {
        let cfg = RunConfig::load(None, &[]).unwrap();
        let t = &cfg.train;
        assert_eq!(t.loss.tau, 0.1);
        assert!(t.loss.alpha.iter().all(|&a| a == 0.8));
        assert_eq!(t.loss.gamma, 2.0);
        assert_eq!(t.optimizer_stage1.learning_rate, 1e-3);
        assert_eq!(t.optimizer_stage2.learning_rate, 1e-3);
        assert_eq!(t.batch_size, 16);
        assert_eq!((t.epochs_stage1, t.epochs_stage2), (15, 10));
    }

    #[test]
    fn overrides_create_nested_keys_and_parse_json() {
        let cfg = RunConfig::load(
            None,
            &[
                "train.seed=3".into(),
                "train.loss.alpha=[0.1,0.2,0.3,0.4]".into(),
                "data_dir=some/dir".into(),
                "synthetic.class_proportions=[0.5,0.5]".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.seed, 3);
        assert_eq!(cfg.train.loss.alpha, vec![0.1, 0.2, 0.3, 0.4]);
        assert_eq!(cfg.data_dir.as_deref(), Some(Path::new("some/dir")));
        assert_eq!(cfg.synthetic.class_proportions, vec![0.5, 0.5]);
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_path() {
        let err = RunConfig::load(None, &["train.loss.beta=1".into()]).unwrap_err();
        assert_eq!(err.code, 2);
        assert!(err.message.contains("train.loss"), "{}", err.message);
        assert!(err.message.contains("beta"), "{}", err.message);
        let err = RunConfig::load(None, &["train.batch_size=\"many\"".into()]).unwrap_err();
        assert!(err.message.contains("train.batch_size"), "{}", err.message);
    }

    #[test]
    fn malformed_overrides_are_usage_errors() {
        for bad in ["noequals", "=3", "train..seed=1", "train.seed.x=1"] {
            assert_eq!(RunConfig::load(None, &["train.seed=1".into(), bad.into()]).unwrap_err().code, 2, "{bad}");
        }
    }
}
