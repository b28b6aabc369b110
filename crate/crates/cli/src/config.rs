//! Layered configuration: defaults < config file < `VADER_*` environment < command-line flags.
//!
//! The file is TOML. Keys mirror the struct layout, for example
//!
//! ```toml
//! scene = "scene.json"
//!
//! [exec.planner]
//! lambda_fk = 1.0
//!
//! [exec.noise]
//! sigma_t_coarse = 0.005
//!
//! [control]
//! rate_hz = 100.0
//! ```
//!
//! Environment variables use `__` between path segments: `VADER_EXEC__PLANNER__SEED=3`.
//! Flags use dotted paths: `--set exec.planner.seed=3`. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use vader_harvest::executive::ExecConfig;
use vader_teleop::ControlLoopConfig;

pub const ENV_PREFIX: &str = "VADER_";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchSettings {
    pub trials: usize,
    pub base_seed: u64,
    pub center_band: f64,
    pub histogram_bins: usize,
}

impl Default for BatchSettings {
    fn default() -> Self {
        let d = vader_harvest::batch::BatchConfig::default();
        Self {
            trials: d.trials,
            base_seed: d.base_seed,
            center_band: d.center_band,
            histogram_bins: d.histogram_bins,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Scene JSON; the built-in cell when absent.
    pub scene: Option<PathBuf>,
    /// Executive settings, including `fit`, `planner` and `noise`.
    pub exec: ExecConfig,
    pub control: ControlLoopConfig,
    pub batch: BatchSettings,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config {path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("override `{0}` must look like key.path=value")]
    BadOverride(String),
    #[error("`{key}` cannot be set: `{segment}` is not a table")]
    NotATable { key: String, segment: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Overrides from one layer, as (dotted key, raw value) pairs.
pub type Overrides = Vec<(String, String)>;

pub fn parse_override(s: &str) -> Result<(String, String), ConfigError> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(ConfigError::BadOverride(s.to_string())),
    }
}

/// `VADER_*` variables as overrides, sorted by key for a stable merge order.
pub fn env_overrides<I: IntoIterator<Item = (String, String)>>(vars: I) -> Overrides {
    let mut out: Overrides = vars
        .into_iter()
        .filter_map(|(k, v)| {
            let rest = k.strip_prefix(ENV_PREFIX)?;
            Some((rest.to_lowercase().replace("__", "."), v))
        })
        .collect();
    out.sort();
    out
}

/// Raw override text as a typed value: anything TOML reads as a value, else a plain string.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .and_then(|v| serde_json::to_value(v).ok())
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn merge(base: &mut Value, layer: Value) {
    match (base, layer) {
        (Value::Object(b), Value::Object(l)) => {
            for (k, v) in l {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, l) => *b = l,
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), ConfigError> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| ConfigError::NotATable {
            key: key.to_string(),
            segment: parts[..i].join("."),
        })?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    Ok(())
}

/// Reads a TOML config file into a JSON tree.
pub fn read_file(path: &Path) -> Result<Value, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let table: toml::Table = toml::from_str(&text).map_err(|e| ConfigError::Parse {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    serde_json::to_value(table).map_err(|e| ConfigError::Parse {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

impl Config {
    /// Merges the layers in precedence order and validates the result.
    pub fn load(file: Option<&Path>, env: &Overrides, flags: &Overrides) -> Result<Self, ConfigError> {
        let mut tree = serde_json::to_value(Config::default()).expect("defaults serialize");
        if let Some(path) = file {
            merge(&mut tree, read_file(path)?);
        }
        for (k, v) in env.iter().chain(flags) {
            set_path(&mut tree, k, parse_value(v))?;
        }
        let cfg: Config = serde_json::from_value(tree).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.exec.fit.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.exec.noise.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.control.validate().map_err(ConfigError::Invalid)?;
        if self.batch.trials == 0 {
            return Err(ConfigError::Invalid("batch.trials must be at least 1".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn o(pairs: &[(&str, &str)]) -> Overrides {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn later_layers_win() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[exec.planner]\nseed = 5\nlambda_fk = 0.5\n[control]\nrate_hz = 50.0\n").unwrap();
        let env = env_overrides(vec![
            ("VADER_EXEC__PLANNER__SEED".to_string(), "6".to_string()),
            ("HOME".to_string(), "/root".to_string()),
        ]);
        assert_eq!(env, o(&[("exec.planner.seed", "6")]));
        let flags = o(&[("exec.planner.seed", "7"), ("exec.parallel", "false")]);
        let c = Config::load(Some(&path), &env, &flags).unwrap();
        assert_eq!(c.exec.planner.seed, 7);
        assert_eq!(c.exec.planner.lambda_fk, 0.5);
        assert_eq!(c.control.rate_hz, 50.0);
        assert!(!c.exec.parallel);
        let c = Config::load(Some(&path), &env, &Vec::new()).unwrap();
        assert_eq!(c.exec.planner.seed, 6);
        assert_eq!(Config::load(None, &Vec::new(), &Vec::new()).unwrap(), Config::default());
    }

    #[test]
    fn unknown_and_mistyped_keys_are_rejected() {
        assert!(Config::load(None, &Vec::new(), &o(&[("exec.planer.seed", "1")])).is_err());
        assert!(Config::load(None, &Vec::new(), &o(&[("colour", "1")])).is_err());
        assert!(Config::load(None, &Vec::new(), &o(&[("exec.planner.seed", "many")])).is_err());
        assert!(Config::load(None, &Vec::new(), &o(&[("batch.trials", "0")])).is_err());
        assert!(Config::load(None, &Vec::new(), &o(&[("exec.parallel.x", "1")])).is_err());
        assert!(parse_override("novalue").is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[exec]\nspeed = 3\n").unwrap();
        assert!(Config::load(Some(&path), &Vec::new(), &Vec::new()).is_err());
    }

    #[test]
    fn optional_and_string_values_parse() {
        let c = Config::load(None, &Vec::new(), &o(&[("exec.storage_budget_s", "2.5"), ("scene", "cell.json")])).unwrap();
        assert_eq!(c.exec.storage_budget_s, Some(2.5));
        assert_eq!(c.scene, Some(PathBuf::from("cell.json")));
        assert_eq!(c.exec.grasp.policy, vader_core::grasp::GraspPolicy::ClosestConfig);
        let c = Config::load(None, &Vec::new(), &o(&[("exec.grasp.policy", "first_feasible")])).unwrap();
        assert_eq!(c.exec.grasp.policy, vader_core::grasp::GraspPolicy::FirstFeasible);
    }

    #[test]
    fn hash_tracks_content() {
        let a = Config::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.exec.planner.seed += 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
