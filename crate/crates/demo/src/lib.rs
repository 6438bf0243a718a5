//! WebAssembly bindings for the static page in `www/`.
//!
//! Every export returns flat `Float64Array`s; the layout is documented on
//! each function. The `*_impl` functions carry the logic and are what the
//! native tests exercise.

use qclmix::augmentation::{mixup_batch, MixupConfig};
use qclmix::autodiff::Graph;
use qclmix::metrics::Metrics;
use qclmix::model::{self, Variant};
use qclmix::rng::{self, Rng};
use qclmix::train::{TrainConfig, Trainer};
use qclmix::{Error, Result, Tensor};
use wasm_bindgen::prelude::*;

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

fn points(xy: &[f64]) -> Result<Tensor> {
    if xy.len() % 2 != 0 {
        return Err(Error::Data("coordinates must come in x,y pairs".into()));
    }
    Tensor::matrix(xy.len() / 2, 2, xy.to_vec())
}

pub fn mixup_impl(xy: &[f64], labels: &[u32], k: usize, alpha: f64, seed: u32) -> Result<Vec<f64>> {
    let x = points(xy)?;
    let y: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    if y.len() != x.rows() {
        return Err(Error::Data(format!("{} labels for {} points", y.len(), x.rows())));
    }
    let classes = y.iter().max().map_or(1, |m| m + 1).max(2);
    let cfg = MixupConfig {
        alpha,
        k_neighbors: k,
        enabled: true,
    };
    let m = mixup_batch(&x, &y, classes, &cfg, &mut rng::seeded(seed.into()))?;
    let mut out = Vec::with_capacity(4 * x.rows());
    for (r, row) in m.log.iter().zip(0..) {
        out.extend([r.partner as f64, r.lambda, m.x_mix.get2(row, 0), m.x_mix.get2(row, 1)]);
    }
    Ok(out)
}

/// kNN-guided mixup of one batch of 2-D points. Per point:
/// `[partner, lambda, mixed_x, mixed_y]`.
#[wasm_bindgen]
pub fn mixup(xy: &[f64], labels: &[u32], k: usize, alpha: f64, seed: u32) -> Result<Vec<f64>, JsError> {
    mixup_impl(xy, labels, k, alpha, seed).map_err(js)
}

pub fn qe_field_impl(theta0: f64, theta1: f64, extent: f64, res: usize) -> Result<Vec<f64>> {
    if res < 2 {
        return Err(Error::Config("grid resolution must be at least 2".into()));
    }
    let step = 2.0 * extent / (res - 1) as f64;
    let mut grid = Vec::with_capacity(2 * res * res);
    for i in 0..res {
        for j in 0..res {
            grid.extend([-extent + j as f64 * step, extent - i as f64 * step]);
        }
    }
    let mut g = Graph::new();
    let x = g.constant(points(&grid)?);
    let theta = g.constant(Tensor::vector(vec![theta0, theta1]));
    let out = model::qe_forward(&mut g, x, theta)?;
    let v = g.value(out);
    let mut field = Vec::with_capacity(3 * res * res);
    for r in 0..res * res {
        let (px, py) = (grid[2 * r] * theta0.cos(), grid[2 * r + 1] * theta1.cos());
        let gate = if px != 0.0 {
            v.get2(r, 0) / px
        } else if py != 0.0 {
            v.get2(r, 1) / py
        } else {
            0.5
        };
        field.extend([v.get2(r, 0), v.get2(r, 1), gate]);
    }
    Ok(field)
}

/// QE layer over a `res x res` grid spanning `[-extent, extent]^2`, rows top
/// to bottom. Per cell: `[out_x, out_y, gate]`.
#[wasm_bindgen]
pub fn qe_field(theta0: f64, theta1: f64, extent: f64, res: usize) -> Result<Vec<f64>, JsError> {
    qe_field_impl(theta0, theta1, extent, res).map_err(js)
}

fn normal(r: &mut Rng) -> f64 {
    let u = rng::unit(r).max(f64::MIN_POSITIVE);
    (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * rng::unit(r)).cos()
}

/// Two interleaved half-moons; `minority` is the share of class 1.
pub fn moons(n: usize, minority: f64, noise: f64, seed: u64) -> (Vec<f64>, Vec<usize>) {
    let mut r = rng::seeded(seed);
    let n1 = ((n as f64 * minority).round() as usize).clamp(2, n.saturating_sub(2));
    let mut xy = Vec::with_capacity(2 * n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let c = usize::from(i < n1);
        let t = std::f64::consts::PI * rng::unit(&mut r);
        let (px, py) = if c == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        xy.push(px + noise * normal(&mut r));
        xy.push(py + noise * normal(&mut r));
        y.push(c);
    }
    (xy, y)
}

/// Step-by-step training on a generated moons set, for the boundary view.
#[wasm_bindgen]
pub struct ToyRun {
    trainer: Trainer,
    x: Tensor,
    y: Vec<usize>,
    mean: [f64; 2],
    std: [f64; 2],
}

impl ToyRun {
    pub fn create(n: usize, minority: f64, noise: f64, variant: &str, epochs: usize, seed: u32) -> Result<ToyRun> {
        let v: Variant = variant.parse()?;
        let (xy, y) = moons(n, minority, noise, seed.into());
        let raw = points(&xy)?;
        let scaler = qclmix::data::Scaler::fit(&raw);
        let x = scaler.transform(&raw);
        let cfg = TrainConfig {
            epochs,
            batch_size: 32,
            seed: seed.into(),
            ablation: v.ablation(),
            ..TrainConfig::default()
        };
        let trainer = Trainer::new(x.clone(), y.clone(), 2, cfg)?;
        Ok(ToyRun {
            trainer,
            x,
            y,
            mean: [scaler.mean[0], scaler.mean[1]],
            std: [scaler.std[0], scaler.std[1]],
        })
    }

    pub fn advance(&mut self) -> Result<Vec<f64>> {
        if self.trainer.finished() {
            return Err(Error::Config("training already finished".into()));
        }
        let log = self.trainer.run_epoch(&self.x, &self.y)?;
        let m: Metrics = log.eval;
        Ok(vec![
            log.epoch as f64,
            log.loss.hybrid,
            m.accuracy,
            m.macro_f1,
        ])
    }

    pub fn grid(&self, res: usize, extent: f64) -> Result<Vec<f64>> {
        if res < 2 {
            return Err(Error::Config("grid resolution must be at least 2".into()));
        }
        let step = 2.0 * extent / (res - 1) as f64;
        let mut g = Vec::with_capacity(2 * res * res);
        for i in 0..res {
            for j in 0..res {
                let (px, py) = (-extent + j as f64 * step, extent - i as f64 * step);
                g.push((px - self.mean[0]) / self.std[0]);
                g.push((py - self.mean[1]) / self.std[1]);
            }
        }
        let (logits, _) = model::infer(&self.trainer.params, &self.trainer.model, &points(&g)?)?;
        Ok((0..res * res)
            .map(|r| {
                let (a, b) = (logits.get2(r, 0), logits.get2(r, 1));
                1.0 / (1.0 + (a - b).exp())
            })
            .collect())
    }
}

#[wasm_bindgen]
impl ToyRun {
    /// `variant` is one of `full`, `no-quantum`, `no-mixup`, `no-attention`.
    #[wasm_bindgen(constructor)]
    pub fn new(n: usize, minority: f64, noise: f64, variant: &str, epochs: usize, seed: u32) -> Result<ToyRun, JsError> {
        ToyRun::create(n, minority, noise, variant, epochs, seed).map_err(js)
    }

    /// Raw points as `[x, y, label]` triples.
    pub fn points(&self) -> Vec<f64> {
        (0..self.y.len())
            .flat_map(|i| {
                [
                    self.x.get2(i, 0) * self.std[0] + self.mean[0],
                    self.x.get2(i, 1) * self.std[1] + self.mean[1],
                    self.y[i] as f64,
                ]
            })
            .collect()
    }

    /// One epoch; returns `[epoch, loss, accuracy, maF1]` on the training set.
    pub fn step(&mut self) -> Result<Vec<f64>, JsError> {
        self.advance().map_err(js)
    }

    pub fn finished(&self) -> bool {
        self.trainer.finished()
    }

    /// Probability of class 1 over a `res x res` grid in raw coordinates,
    /// rows top to bottom.
    pub fn boundary(&self, res: usize, extent: f64) -> Result<Vec<f64>, JsError> {
        self.grid(res, extent).map_err(js)
    }
}
