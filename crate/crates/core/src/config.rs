//! Flat `key = value` configuration files layered over [`TrainConfig`].
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! errors so that typos do not silently fall back to defaults.

use std::path::Path;

use crate::error::{Error, Result};
use crate::train::TrainConfig;

pub const KEYS: &[&str] = &[
    "epochs",
    "batch_size",
    "max_lr",
    "pct_start",
    "div_factor",
    "final_div_factor",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "weight_decay",
    "seed",
    "gamma",
    "beta1",
    "tau",
    "margin",
    "alpha_loss",
    "miner_epsilon",
    "mixup_alpha",
    "k_neighbors",
    "mixup",
    "quantum",
    "attention",
    "val_fraction",
    "test_ratio",
];

/// Parses `key = value` lines into pairs, in file order.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{v}`"))),
    }
}

/// Sets one key on `cfg`.
pub fn apply(cfg: &mut TrainConfig, key: &str, v: &str) -> Result<()> {
    match key {
        "epochs" => cfg.epochs = num(key, v)?,
        "batch_size" => cfg.batch_size = num(key, v)?,
        "max_lr" => cfg.schedule.max_lr = num(key, v)?,
        "pct_start" => cfg.schedule.pct_start = num(key, v)?,
        "div_factor" => cfg.schedule.div_factor = num(key, v)?,
        "final_div_factor" => cfg.schedule.final_div_factor = num(key, v)?,
        "adam_beta1" => cfg.adam.beta1 = num(key, v)?,
        "adam_beta2" => cfg.adam.beta2 = num(key, v)?,
        "adam_eps" => cfg.adam.eps = num(key, v)?,
        "weight_decay" => cfg.adam.weight_decay = num(key, v)?,
        "seed" => cfg.seed = num(key, v)?,
        "gamma" => cfg.loss.gamma = num(key, v)?,
        "beta1" => cfg.loss.beta1 = num(key, v)?,
        "tau" => cfg.loss.tau = num(key, v)?,
        "margin" => cfg.loss.margin = num(key, v)?,
        "alpha_loss" => cfg.loss.alpha = num(key, v)?,
        "miner_epsilon" => cfg.loss.miner_epsilon = num(key, v)?,
        "mixup_alpha" => cfg.mixup.alpha = num(key, v)?,
        "k_neighbors" => cfg.mixup.k_neighbors = num(key, v)?,
        "mixup" => cfg.ablation.use_mixup = flag(key, v)?,
        "quantum" => cfg.ablation.use_quantum = flag(key, v)?,
        "attention" => cfg.ablation.use_attention = flag(key, v)?,
        "val_fraction" => {
            cfg.val_fraction = match v {
                "" | "none" => None,
                _ => Some(num(key, v)?),
            }
        }
        "test_ratio" => cfg.test_ratio = num(key, v)?,
        _ => {
            return Err(Error::Config(format!(
                "unknown key `{key}`; known: {}",
                KEYS.join(", ")
            )))
        }
    }
    Ok(())
}

pub fn apply_text(cfg: &mut TrainConfig, text: &str) -> Result<()> {
    for (k, v) in parse_pairs(text)? {
        apply(cfg, &k, &v)?;
    }
    Ok(())
}

pub fn load(cfg: &mut TrainConfig, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    apply_text(cfg, &text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Every key with its resolved value, in [`KEYS`] order; reading the output
/// back with [`apply_text`] reproduces `cfg`.
pub fn render(cfg: &TrainConfig) -> String {
    let vf = cfg.val_fraction.map_or("none".to_string(), |f| f.to_string());
    let values = [
        cfg.epochs.to_string(),
        cfg.batch_size.to_string(),
        cfg.schedule.max_lr.to_string(),
        cfg.schedule.pct_start.to_string(),
        cfg.schedule.div_factor.to_string(),
        cfg.schedule.final_div_factor.to_string(),
        cfg.adam.beta1.to_string(),
        cfg.adam.beta2.to_string(),
        cfg.adam.eps.to_string(),
        cfg.adam.weight_decay.to_string(),
        cfg.seed.to_string(),
        cfg.loss.gamma.to_string(),
        cfg.loss.beta1.to_string(),
        cfg.loss.tau.to_string(),
        cfg.loss.margin.to_string(),
        cfg.loss.alpha.to_string(),
        cfg.loss.miner_epsilon.to_string(),
        cfg.mixup.alpha.to_string(),
        cfg.mixup.k_neighbors.to_string(),
        cfg.ablation.use_mixup.to_string(),
        cfg.ablation.use_quantum.to_string(),
        cfg.ablation.use_attention.to_string(),
        vf,
        cfg.test_ratio.to_string(),
    ];
    KEYS.iter()
        .zip(values)
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}
