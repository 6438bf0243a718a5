//! Sidecar written next to every checkpoint: the resolved training config,
//! the label encoding and the fitted scaler. The checkpoint itself holds
//! parameters only.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use qclmix::config;
use qclmix::data::{LabelColumn, Scaler};
use qclmix::train::TrainConfig;
use qclmix::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Meta {
    pub dataset: String,
    pub label: LabelColumn,
    /// Class names in index order.
    pub labels: Vec<String>,
    pub config: TrainConfig,
    pub scaler: Scaler,
}

pub fn meta_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("meta")
}

fn join(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(" ")
}

fn floats(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| Error::Data(format!("sidecar `{key}`: bad number `{t}`")))
        })
        .collect()
}

impl Meta {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "dataset = {}", self.dataset);
        let label = match &self.label {
            LabelColumn::Last => "last",
            LabelColumn::Named(n) => n,
        };
        let _ = writeln!(s, "label_column = {label}");
        let _ = writeln!(s, "labels = {}", self.labels.join("|"));
        s.push_str(&config::render(&self.config));
        let _ = writeln!(s, "scaler_mean = {}", join(&self.scaler.mean));
        let _ = writeln!(s, "scaler_std = {}", join(&self.scaler.std));
        s
    }

    pub fn parse(text: &str) -> Result<Meta> {
        let mut dataset = None;
        let mut label = LabelColumn::Last;
        let mut labels = None;
        let mut cfg = TrainConfig::default();
        let (mut mean, mut std) = (None, None);
        for (k, v) in config::parse_pairs(text)? {
            match k.as_str() {
                "dataset" => dataset = Some(v),
                "label_column" => label = LabelColumn::parse(&v),
                "labels" => labels = Some(v.split('|').map(str::to_string).collect()),
                "scaler_mean" => mean = Some(floats(&k, &v)?),
                "scaler_std" => std = Some(floats(&k, &v)?),
                _ => config::apply(&mut cfg, &k, &v)?,
            }
        }
        let missing = |k: &str| Error::Data(format!("sidecar lacks `{k}`"));
        let mean = mean.ok_or_else(|| missing("scaler_mean"))?;
        let std = std.ok_or_else(|| missing("scaler_std"))?;
        if mean.len() != std.len() {
            return Err(Error::Data("sidecar scaler lengths differ".into()));
        }
        Ok(Meta {
            dataset: dataset.ok_or_else(|| missing("dataset"))?,
            label,
            labels: labels.ok_or_else(|| missing("labels"))?,
            config: cfg,
            scaler: Scaler { mean, std },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Meta> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read sidecar {}: {e}", path.display())))?;
        Meta::parse(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}
