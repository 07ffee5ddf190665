//! Run configuration with flag > config-file > default precedence.
//!
//! A config file is a JSON object with any subset of the fields below; flags
//! override file values, and the fully resolved configuration is echoed to
//! stderr and written next to the outputs so every run is reproducible.

use std::path::Path;

use serde::{Deserialize, Serialize};
use valler_core::{Error, Result};

pub const SEED_ENV: &str = "VALLER_SEED";

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    // Corpus knobs.
    pub count: Option<usize>,
    pub v_p: Option<u16>,
    pub dim: Option<usize>,
    pub noise_std: Option<f64>,
    pub min_phonemes: Option<usize>,
    pub max_phonemes: Option<usize>,
    pub min_duration: Option<usize>,
    pub max_duration: Option<usize>,
    pub unique_phonemes: Option<bool>,
    // Codec knobs.
    pub k: Option<usize>,
    pub iters: Option<usize>,
    pub merge: Option<String>,
    // LM knobs.
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub model_dim: Option<usize>,
    pub ffn_dim: Option<usize>,
    pub dropout: Option<f64>,
    pub max_seq: Option<usize>,
    pub steps: Option<usize>,
    pub lr: Option<f64>,
    pub micro_batch: Option<usize>,
    pub lambda: Option<f64>,
    // Decode knobs.
    pub top_p: Option<f64>,
    pub mode: Option<String>,
    pub budget: Option<usize>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<FileConfig> {
        match path {
            None => Ok(FileConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    Error::invalid(format!("cannot read config file {}: {e}", p.display()))
                })?;
                Ok(serde_json::from_str(&text)?)
            }
        }
    }
}

/// flag > config file > default.
pub fn resolve<T: Copy>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

pub fn resolve_opt<T: Clone>(flag: Option<T>, file: Option<T>) -> Option<T> {
    flag.or(file)
}

/// Seed resolution for commands that require one:
/// flag > config file > VALLER_SEED > error.
pub fn resolve_seed(flag: Option<u64>, file: Option<u64>) -> Result<u64> {
    if let Some(s) = flag.or(file) {
        return Ok(s);
    }
    if let Ok(v) = std::env::var(SEED_ENV) {
        return v
            .parse::<u64>()
            .map_err(|_| Error::invalid(format!("{SEED_ENV}={v} is not a valid seed")));
    }
    Err(Error::invalid(format!(
        "a seed is required (--seed, config file, or {SEED_ENV})"
    )))
}

/// Echo the resolved configuration and persist it under the output dir.
pub fn log_resolved<T: Serialize>(out_dir: &Path, resolved: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(resolved)?;
    eprintln!("resolved config:\n{json}");
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("run_config.json"), json)?;
    Ok(())
}
