//! Run configuration files and dotted-key overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use mhvae_core::trainer::TrainConfig;

use crate::CliError;

pub const DATA_DIR_ENV: &str = "MHVAE_DATA_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub eval: EvalDefaults,
    /// Parent of the timestamped run directories.
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding the IDX files. Falls back to `$MHVAE_DATA_DIR/<dataset>`,
    /// then `data/<dataset>`.
    #[serde(default)]
    pub dir: Option<PathBuf>,
    /// Keep a seeded random subset of this many records before splitting.
    #[serde(default)]
    pub subset: Option<usize>,
    #[serde(default)]
    pub split_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalDefaults {
    pub k: usize,
    pub inner_batch: usize,
    pub seed: u64,
    /// Evaluate only the first this many test records.
    #[serde(default)]
    pub test_limit: Option<usize>,
}

impl Default for EvalDefaults {
    fn default() -> Self {
        EvalDefaults {
            k: 5000,
            inner_batch: 500,
            seed: 0,
            test_limit: None,
        }
    }
}

impl DataConfig {
    pub fn resolve_dir(&self, dataset: &str) -> PathBuf {
        if let Some(d) = &self.dir {
            return d.clone();
        }
        match std::env::var_os(DATA_DIR_ENV) {
            Some(root) => Path::new(&root).join(dataset),
            None => Path::new("data").join(dataset),
        }
    }
}

/// One `key=value` override; the value is parsed as JSON and taken as a
/// plain string when that fails.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Override {
    pub key: String,
    pub value: Value,
}

impl std::str::FromStr for Override {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (key, raw) = s
            .split_once('=')
            .ok_or_else(|| format!("override `{s}` is not of the form key=value"))?;
        if key.is_empty() || key.split('.').any(str::is_empty) {
            return Err(format!("override key `{key}` is malformed"));
        }
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        Ok(Override {
            key: key.to_string(),
            value,
        })
    }
}

fn apply(doc: &mut Value, ov: &Override) -> Result<(), CliError> {
    let parts: Vec<&str> = ov.key.split('.').collect();
    let mut node = doc;
    for (depth, part) in parts.iter().enumerate() {
        let last = depth + 1 == parts.len();
        node = match node {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), ov.value.clone());
                    return Ok(());
                }
                map.entry(part.to_string())
                    .or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let i: usize = part
                    .parse()
                    .map_err(|_| CliError::Config(format!("`{}`: `{part}` is not an array index", ov.key)))?;
                let len = items.len();
                let slot = items
                    .get_mut(i)
                    .ok_or_else(|| CliError::Config(format!("`{}`: index {i} out of {len}", ov.key)))?;
                if last {
                    *slot = ov.value.clone();
                    return Ok(());
                }
                slot
            }
            _ => {
                return Err(CliError::Config(format!(
                    "`{}`: `{part}` is below a scalar value",
                    ov.key
                )))
            }
        };
    }
    Ok(())
}

impl RunConfig {
    /// Parses a JSON document, applies overrides in order and validates the
    /// result. Unknown keys anywhere are rejected.
    pub fn from_json(text: &str, overrides: &[Override]) -> Result<RunConfig, CliError> {
        let mut doc: Value =
            serde_json::from_str(text).map_err(|e| CliError::Config(format!("config is not valid JSON: {e}")))?;
        for ov in overrides {
            apply(&mut doc, ov)?;
        }
        let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if cfg.eval.k == 0 || cfg.eval.inner_batch == 0 {
            return Err(CliError::Config("eval.k and eval.inner_batch must be positive".into()));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[Override]) -> Result<RunConfig, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        RunConfig::from_json(&text, overrides).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}
