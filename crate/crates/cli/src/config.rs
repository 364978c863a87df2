//! Config resolution with precedence flags > file > preset defaults.

use std::path::{Path, PathBuf};

use r2n2::experiments::{preset_config, ExperimentConfig};
use serde_json::Value;

use crate::{CliError, Result};

/// Values given on the command line. `None` leaves the lower layers alone.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
}

/// Recursively merges `patch` into `base`. Objects merge key by key; any
/// other value replaces what was there.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
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

pub fn read_config_file(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let v: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if !v.is_object() {
        return Err(CliError::Config(format!("{}: expected a JSON object", path.display())));
    }
    Ok(v)
}

pub fn resolve(preset: &str, file: Option<Value>, flags: &Overrides) -> Result<ExperimentConfig> {
    let defaults = preset_config(preset).map_err(|e| CliError::Config(e.to_string()))?;
    let mut value = serde_json::to_value(&defaults).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(file) = file {
        if let Some(p) = file.get("preset") {
            if p.as_str() != Some(preset) {
                return Err(CliError::Config(format!("config file is for preset {p}, not `{preset}`")));
            }
        }
        merge(&mut value, file);
    }
    let mut cfg: ExperimentConfig =
        serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(seed) = flags.seed {
        cfg.seed = seed;
    }
    if let Some(epochs) = flags.epochs {
        cfg.training.epochs = epochs;
    }
    if let Some(threads) = flags.threads {
        if threads == 0 {
            return Err(CliError::Config("--threads must be >= 1".into()));
        }
        cfg.training.threads = Some(threads);
    }
    if let Some(out) = &flags.out {
        cfg.out_dir = Some(out.clone());
    }
    if cfg.out_dir.is_none() {
        cfg.out_dir = Some(PathBuf::from("runs").join(preset));
    }
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}
