//! Tabular dataset loading, stratified splitting and standardization.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Cells treated as missing.
const MISSING: [&str; 4] = ["", "?", "na", "nan"];

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// `[N, D]`
    pub x: Tensor,
    pub y: Vec<usize>,
    /// Original label text, indexed by encoded label.
    pub labels: Vec<String>,
    pub feature_names: Vec<String>,
    /// Rows skipped because a cell was missing.
    pub dropped_rows: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.x.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        class_counts(&self.y, self.num_classes())
    }

    pub fn subset(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        (self.x.select_rows(idx), idx.iter().map(|&i| self.y[i]).collect())
    }
}

/// Which column holds the label.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub enum LabelColumn {
    #[default]
    Last,
    Named(String),
}

impl LabelColumn {
    pub fn parse(s: &str) -> Self {
        if s.is_empty() || s == "last" {
            LabelColumn::Last
        } else {
            LabelColumn::Named(s.to_string())
        }
    }
}

pub fn load_csv(path: impl AsRef<Path>, label: &LabelColumn) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    read_csv(file, &name, label)
}

/// Parses CSV text with a header row. Labels are encoded in order of first
/// appearance.
pub fn read_csv<R: std::io::Read>(reader: R, name: &str, label: &LabelColumn) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Data(format!("{name}: unreadable header: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.len() < 2 {
        return Err(Error::Data(format!(
            "{name}: need at least one feature and a label column"
        )));
    }
    let label_idx = match label {
        LabelColumn::Last => header.len() - 1,
        LabelColumn::Named(n) => header.iter().position(|h| h == n).ok_or_else(|| {
            Error::Data(format!("{name}: no label column `{n}` in header {header:?}"))
        })?,
    };
    let feature_names: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != label_idx)
        .map(|(_, h)| h.clone())
        .collect();

    let mut data = Vec::new();
    let mut y = Vec::new();
    let mut labels: Vec<String> = Vec::new();
    let mut codes: HashMap<String, usize> = HashMap::new();
    let mut dropped = 0usize;
    for (r, rec) in rdr.records().enumerate() {
        let line = r + 2;
        let rec = rec.map_err(|e| Error::Data(format!("{name}: line {line}: {e}")))?;
        if rec.len() != header.len() {
            return Err(Error::Data(format!(
                "{name}: line {line} has {} cells, header has {}",
                rec.len(),
                header.len()
            )));
        }
        if rec.iter().any(|c| MISSING.contains(&c.to_ascii_lowercase().as_str())) {
            dropped += 1;
            continue;
        }
        let mut row = Vec::with_capacity(feature_names.len());
        for (i, cell) in rec.iter().enumerate() {
            if i == label_idx {
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| {
                Error::Data(format!(
                    "{name}: column `{}` is not numeric (line {line}: `{cell}`); categorical features are not supported",
                    header[i]
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "{name}: column `{}` has non-finite value on line {line}",
                    header[i]
                )));
            }
            row.push(v);
        }
        let lab = &rec[label_idx];
        let code = *codes.entry(lab.to_string()).or_insert_with(|| {
            labels.push(lab.to_string());
            labels.len() - 1
        });
        data.extend(row);
        y.push(code);
    }
    if y.is_empty() {
        return Err(Error::Data(format!("{name}: empty dataset")));
    }
    if dropped > 0 {
        log::warn!("{name}: dropped {dropped} rows with missing values");
    }
    Ok(Dataset {
        name: name.to_string(),
        x: Tensor::matrix(y.len(), feature_names.len(), data)?,
        y,
        labels,
        feature_names,
        dropped_rows: dropped,
    })
}

pub fn class_counts(y: &[usize], classes: usize) -> Vec<usize> {
    let mut c = vec![0; classes];
    for &l in y {
        c[l] += 1;
    }
    c
}

/// Largest over smallest class count among the classes that occur.
pub fn imbalance_ratio(y: &[usize]) -> Result<f64> {
    let classes = y.iter().max().map_or(0, |m| m + 1);
    let counts: Vec<usize> = class_counts(y, classes).into_iter().filter(|&c| c > 0).collect();
    if counts.len() < 2 {
        return Err(Error::Data("imbalance ratio needs at least 2 classes".into()));
    }
    let max = *counts.iter().max().unwrap_or(&0);
    let min = *counts.iter().min().unwrap_or(&1);
    Ok(max as f64 / min as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
    pub ratio: f64,
}

/// Per class: shuffle that class's indices and send the first
/// `round(ratio * n_c)` to test. Classes with a single sample stay in train.
pub fn stratified_split(y: &[usize], ratio: f64, seed: u64) -> Result<Split> {
    let mut rng = rng::stream(seed, rng::Stream::Split);
    let (train, test) = stratified_indices(y, ratio, &mut rng)?;
    Ok(Split {
        train,
        test,
        seed,
        ratio,
    })
}

/// Stratified partition with a caller-supplied generator. Both halves are
/// returned sorted.
pub fn stratified_indices(y: &[usize], ratio: f64, rng: &mut Rng) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!(
            "split ratio must lie strictly between 0 and 1, got {ratio}"
        )));
    }
    let classes = y.iter().max().map_or(0, |m| m + 1);
    let mut train = Vec::with_capacity(y.len());
    let mut test = Vec::new();
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..y.len()).filter(|&i| y[i] == c).collect();
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 2 {
            log::warn!("class {c} has {} sample(s); kept in train only", idx.len());
            train.extend(idx);
            continue;
        }
        rng::shuffle(rng, &mut idx);
        let n_test = (ratio * idx.len() as f64).round() as usize;
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    /// Column means and population standard deviations.
    pub fn fit(x: &Tensor) -> Self {
        let (n, d) = (x.rows(), x.cols());
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|s| (s / n as f64).sqrt()).collect();
        Scaler { mean, std }
    }

    /// `(x - mean) / std`; zero-variance columns become 0.
    pub fn transform(&self, x: &Tensor) -> Tensor {
        let d = self.mean.len();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(k, v)| {
                let j = k % d;
                if self.std[j] > 0.0 {
                    (v - self.mean[j]) / self.std[j]
                } else {
                    0.0
                }
            })
            .collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }

    pub fn constant_columns(&self) -> Vec<usize> {
        (0..self.std.len()).filter(|&j| self.std[j] == 0.0).collect()
    }
}

/// Fits on `train` only and scales both matrices.
pub fn standardize(train: &Tensor, test: &Tensor) -> (Tensor, Tensor, Scaler) {
    let s = Scaler::fit(train);
    let constant = s.constant_columns();
    if !constant.is_empty() {
        log::warn!("constant feature columns {constant:?} mapped to 0");
    }
    (s.transform(train), s.transform(test), s)
}

/// One line of a benchmark manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub path: PathBuf,
    pub label: LabelColumn,
}

/// Reads `name,path,label_column` lines. Relative paths resolve against the
/// manifest's directory; a header line starting with `name,` is skipped, as
/// are blank lines and `#` comments.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read manifest {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || (n == 0 && line.starts_with("name,")) {
            continue;
        }
        let parts: Vec<&str> = line.split(',').map(str::trim).collect();
        if parts.len() < 2 || parts.len() > 3 || parts[0].is_empty() || parts[1].is_empty() {
            return Err(Error::Data(format!(
                "manifest {} line {}: expected `name,path,label_column`",
                path.display(),
                n + 1
            )));
        }
        let p = PathBuf::from(parts[1]);
        out.push(ManifestEntry {
            name: parts[0].to_string(),
            path: if p.is_absolute() { p } else { base.join(p) },
            label: LabelColumn::parse(parts.get(2).copied().unwrap_or("")),
        });
    }
    if out.is_empty() {
        return Err(Error::Data(format!("manifest {} lists no datasets", path.display())));
    }
    Ok(out)
}

/// A dataset split and standardized, ready for training.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub name: String,
    pub x_train: Tensor,
    pub y_train: Vec<usize>,
    pub x_test: Tensor,
    pub y_test: Vec<usize>,
    pub num_classes: usize,
    pub scaler: Scaler,
    pub split: Split,
}

pub fn prepare(ds: &Dataset, ratio: f64, seed: u64) -> Result<Prepared> {
    if ds.num_classes() < 2 {
        return Err(Error::Data(format!("{}: needs at least 2 classes", ds.name)));
    }
    let split = stratified_split(&ds.y, ratio, seed)?;
    if split.test.is_empty() {
        return Err(Error::Data(format!("{}: test split is empty", ds.name)));
    }
    let (xtr, ytr) = ds.subset(&split.train);
    let (xte, yte) = ds.subset(&split.test);
    let (x_train, x_test, scaler) = standardize(&xtr, &xte);
    Ok(Prepared {
        name: ds.name.clone(),
        x_train,
        y_train: ytr,
        x_test,
        y_test: yte,
        num_classes: ds.num_classes(),
        scaler,
        split,
    })
}
