use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use qclmix::checkpoint;
use qclmix::data::{self, Dataset, LabelColumn};
use qclmix::metrics::Metrics;
use qclmix::model::{ModelConfig, ModelParams};
use qclmix::train::{self, TrainConfig};
use qclmix::{Error, Result, Tensor};

use crate::meta::{meta_path, Meta};

/// One trained and evaluated model.
#[derive(Clone, Debug)]
pub struct RunRecord {
    pub dataset: String,
    pub variant: String,
    pub seed: u64,
    pub metrics: Metrics,
    pub wall_time: f64,
    pub checkpoint: PathBuf,
}

impl RunRecord {
    pub const HEADER: &'static str =
        "dataset,variant,seed,accuracy,maP,maR,maF1,wall_time_s,checkpoint\n";

    pub fn to_csv(&self) -> String {
        let m = &self.metrics;
        format!(
            "{},{},{},{},{},{},{},{:.3},{}\n",
            self.dataset,
            self.variant,
            self.seed,
            m.accuracy,
            m.macro_precision,
            m.macro_recall,
            m.macro_f1,
            self.wall_time,
            self.checkpoint.display()
        )
    }
}

pub fn variant_name(cfg: &TrainConfig) -> String {
    cfg.ablation
        .variant()
        .map_or_else(|| "custom".to_string(), |v| v.name().to_string())
}

/// Appends `body` under an exclusive file lock, writing `header` first when
/// the file is new or empty.
pub fn append_locked(path: &Path, header: &str, body: &str) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.lock()?;
    if f.metadata()?.len() == 0 {
        f.write_all(header.as_bytes())?;
    }
    f.write_all(body.as_bytes())?;
    f.flush()?;
    f.unlock()?;
    Ok(())
}

/// Splits, scales, trains and evaluates one dataset, writing
/// `model.ckpt`, `model.meta` and `history.csv` into `out`.
pub fn train_run(ds: &Dataset, label: &LabelColumn, cfg: &TrainConfig, out: &Path) -> Result<RunRecord> {
    let start = Instant::now();
    std::fs::create_dir_all(out)?;
    let prep = data::prepare(ds, cfg.test_ratio, cfg.seed)?;
    let fit = train::fit(&prep, cfg)?;
    let ckpt = out.join("model.ckpt");
    checkpoint::save(&fit.outcome.best, &ckpt)?;
    Meta {
        dataset: ds.name.clone(),
        label: label.clone(),
        labels: ds.labels.clone(),
        config: cfg.clone(),
        scaler: prep.scaler.clone(),
    }
    .save(&meta_path(&ckpt))?;
    std::fs::write(out.join("history.csv"), fit.outcome.history.to_csv())?;
    Ok(RunRecord {
        dataset: ds.name.clone(),
        variant: variant_name(cfg),
        seed: cfg.seed,
        metrics: fit.test,
        wall_time: start.elapsed().as_secs_f64(),
        checkpoint: ckpt,
    })
}

/// A checkpoint with its sidecar.
pub struct Loaded {
    pub params: ModelParams,
    pub model: ModelConfig,
    pub meta: Meta,
}

pub fn load_model(ckpt: &Path) -> Result<Loaded> {
    let params = checkpoint::load(ckpt)?;
    let meta = Meta::load(&meta_path(ckpt))?;
    let mut model = params.infer_config();
    model.ablation = meta.config.ablation;
    if meta.labels.len() != model.num_classes || meta.scaler.mean.len() != model.input_dim {
        return Err(Error::Data(format!(
            "sidecar of {} does not match the checkpoint shapes",
            ckpt.display()
        )));
    }
    Ok(Loaded { params, model, meta })
}

/// Loads `path` and re-encodes its labels with the checkpoint's class
/// order, scaled with the stored scaler.
pub fn load_for(loaded: &Loaded, path: &Path, label: Option<&str>) -> Result<(Dataset, Tensor, Vec<usize>)> {
    let col = label.map_or_else(|| loaded.meta.label.clone(), LabelColumn::parse);
    let ds = data::load_csv(path, &col)?;
    if ds.num_features() != loaded.model.input_dim {
        return Err(Error::Data(format!(
            "dimension mismatch: {} has {} features, checkpoint expects {}",
            path.display(),
            ds.num_features(),
            loaded.model.input_dim
        )));
    }
    let y = ds
        .y
        .iter()
        .map(|&i| {
            let name = &ds.labels[i];
            loaded
                .meta
                .labels
                .iter()
                .position(|l| l == name)
                .ok_or_else(|| Error::Data(format!("label `{name}` was not seen in training")))
        })
        .collect::<Result<Vec<_>>>()?;
    let x = loaded.meta.scaler.transform(&ds.x);
    Ok((ds, x, y))
}
