//! `key = value` configuration files.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::experiment::ExperimentConfig;

/// Parses `key = value` lines. Blank lines and `#` comments are skipped;
/// repeated keys are errors.
pub fn parse_pairs(content: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in content.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(Error::Config(format!("line {}: duplicate key {k:?}", i + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Default experiment settings overridden by the pairs in `content`.
pub fn parse_experiment_config(content: &str) -> Result<ExperimentConfig> {
    let mut c = ExperimentConfig::default();
    for (k, v) in parse_pairs(content)? {
        c.set(&k, &v)?;
    }
    c.validate()?;
    Ok(c)
}

pub fn load_experiment_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    parse_experiment_config(&content)
}

/// The settings as a config file that parses back to the same value.
pub fn render_experiment_config(config: &ExperimentConfig) -> String {
    config.pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}
