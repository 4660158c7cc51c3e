//! Flat `key = value` run configuration merged from defaults, the `BLTD_SEED`
//! environment variable, a config file and command-line overrides, in that order.

use std::path::Path;

use bltd::model::ModelConfig;
use bltd::training::TrainConfig;
use bltd::Real;

use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct PatchConfig {
    pub order: usize,
    pub smoothing: Real,
    /// Mean patch length the threshold is calibrated to.
    pub target: Real,
    pub max: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig {
            order: 2,
            smoothing: 0.1,
            target: 4.0,
            max: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub patch: PatchConfig,
}

pub fn seed_from_env() -> Result<Option<u64>, CliError> {
    match std::env::var("BLTD_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::config(format!("BLTD_SEED: expected an integer, got `{v}`"))),
        Err(_) => Ok(None),
    }
}

/// Splits config text into `(line, key, value)` triples, skipping blanks and
/// `#` comments.
pub fn parse_pairs(text: &str) -> Result<Vec<(usize, String, String)>, CliError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() {
            return Err(CliError::config(format!("line {}: empty key or value", i + 1)));
        }
        out.push((i + 1, k.to_string(), v.to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let real = |v: &str| {
            v.parse::<f64>()
                .map(|x| x as Real)
                .map_err(|_| CliError::config(format!("{key}: expected a number, got `{v}`")))
        };
        let int = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| CliError::config(format!("{key}: expected an integer, got `{v}`")))
        };
        match key {
            "patch_order" => self.patch.order = int(value)?,
            "patch_smoothing" => self.patch.smoothing = real(value)?,
            "patch_target" => self.patch.target = real(value)?,
            "patch_max" => self.patch.max = int(value)?,
            _ => {
                let known = self.model.set(key, value).map_err(CliError::config)?
                    || self.train.set(key, value).map_err(CliError::config)?;
                if !known {
                    return Err(CliError::config(format!("unknown config key `{key}`")));
                }
            }
        }
        Ok(())
    }

    /// Applies a `key=value` override from the command line.
    pub fn set_override(&mut self, kv: &str) -> Result<(), CliError> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("override `{kv}` is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::input(format!("cannot read config {}: {e}", path.display())))?;
        for (line, k, v) in parse_pairs(&text)? {
            self.set(&k, &v)
                .map_err(|e| CliError::config(format!("{}:{line}: {}", path.display(), e.message)))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate().map_err(CliError::config)?;
        self.train.validate().map_err(CliError::config)?;
        let p = &self.patch;
        if p.max == 0 || !(p.smoothing > 0.0) || !(p.target > 1.0 && p.target <= p.max as Real) {
            return Err(CliError::config(format!(
                "patcher settings invalid: need smoothing > 0 and 1 < patch_target <= patch_max (got {}, {}, {})",
                p.smoothing, p.target, p.max
            )));
        }
        Ok(())
    }

    pub fn build(file: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        if let Some(s) = seed_from_env()? {
            cfg.train.seed = s;
        }
        if let Some(f) = file {
            cfg.apply_file(f)?;
        }
        for kv in overrides {
            cfg.set_override(kv)?;
        }
        if let Some(s) = seed {
            cfg.train.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
