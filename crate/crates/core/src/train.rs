//! The optimisation loop: seeded shuffling, mixup, one shared forward pass,
//! hybrid loss on the original labels, AdamW under a one-cycle schedule, and
//! per-epoch model selection by macro F1.

use crate::augmentation::{mixup_batch, MixupConfig};
use crate::autodiff::{Graph, Mode};
use crate::data::{stratified_indices, Prepared};
use crate::error::{Error, Result};
use crate::losses::{hybrid_loss, LossBreakdown, LossConfig};
use crate::metrics::{evaluate_predictions, Metrics};
use crate::model::{argmax_rows, infer, model_forward, Ablation, BoundParams, ModelConfig, ModelParams};
use crate::optim::{AdamW, AdamWConfig, OneCycle};
use crate::rng::{self, Rng, Stream};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: OneCycle,
    pub adam: AdamWConfig,
    pub seed: u64,
    pub loss: LossConfig,
    pub mixup: MixupConfig,
    pub ablation: Ablation,
    /// Carve a stratified validation subset of this fraction out of the
    /// training split and select on it instead of the test split.
    pub val_fraction: Option<f64>,
    pub test_ratio: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 64,
            schedule: OneCycle::default(),
            adam: AdamWConfig::default(),
            seed: 42,
            loss: LossConfig::default(),
            mixup: MixupConfig::default(),
            ablation: Ablation::default(),
            val_fraction: None,
            test_ratio: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be >= 2".into()));
        }
        if let Some(f) = self.val_fraction {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Config(format!(
                    "validation fraction must lie in (0, 1), got {f}"
                )));
            }
        }
        if !(self.adam.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be >= 0".into()));
        }
        self.schedule.validate()?;
        self.loss.validate()?;
        if self.mixup.enabled && self.ablation.use_mixup {
            self.mixup.validate()?;
        }
        Ok(())
    }

    pub fn mixup_active(&self) -> bool {
        self.mixup.enabled && self.ablation.use_mixup
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    /// Batch-averaged loss terms.
    pub loss: LossBreakdown,
    pub eval: Metrics,
    /// Number of mixup coefficients drawn this epoch.
    pub lambdas: usize,
    pub mean_lambda: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochLog>,
    /// Index into `epochs` of the retained checkpoint.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "epoch,lr,focal,intra,inter,fvl,supcon,triplet,hybrid,accuracy,maP,maR,maF1,lambdas,mean_lambda\n",
        );
        for e in &self.epochs {
            let l = &e.loss;
            let m = &e.eval;
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                e.epoch,
                e.lr,
                l.focal,
                l.intra,
                l.inter,
                l.fvl,
                l.supcon,
                l.triplet,
                l.hybrid,
                m.accuracy,
                m.macro_precision,
                m.macro_recall,
                m.macro_f1,
                e.lambdas,
                e.mean_lambda
            ));
        }
        s
    }
}

/// Step-by-step trainer; [`train`] drives it to completion.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub params: ModelParams,
    opt: AdamW,
    x: Tensor,
    y: Vec<usize>,
    shuffle_rng: Rng,
    mixup_rng: Rng,
    step: usize,
    total_steps: usize,
    epoch: usize,
}

fn batches(n: usize, size: usize) -> usize {
    let full = n / size;
    if n % size >= 2 {
        full + 1
    } else {
        full
    }
}

fn numerical(epoch: usize, batch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { .. } | Error::Domain { .. } | Error::NonFiniteGradient(_) => {
            Error::Numerical {
                epoch,
                batch,
                detail: e.to_string(),
            }
        }
        other => other,
    }
}

impl Trainer {
    pub fn new(x: Tensor, y: Vec<usize>, num_classes: usize, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (n, d) = x.dims2("train")?;
        if y.len() != n {
            return Err(Error::shape("train", format!("{} labels for {n} rows", y.len())));
        }
        if let Some(&label) = y.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        let per_epoch = batches(n, config.batch_size);
        if per_epoch == 0 {
            return Err(Error::Data(format!("{n} training rows cannot form a batch")));
        }
        let mut model = ModelConfig::new(d, num_classes);
        model.ablation = config.ablation;
        model.ablation.use_mixup = config.mixup_active();
        let params = ModelParams::init(&model, &mut rng::stream(config.seed, Stream::Init))?;
        let opt = AdamW::new(&params, config.adam.clone());
        Ok(Trainer {
            model,
            params,
            opt,
            x,
            y,
            shuffle_rng: rng::stream(config.seed, Stream::Shuffle),
            mixup_rng: rng::stream(config.seed, Stream::Mixup),
            step: 0,
            total_steps: per_epoch * config.epochs,
            epoch: 0,
            config,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    /// One optimisation step on the given rows.
    fn batch_step(&mut self, idx: &[usize], batch: usize) -> Result<(LossBreakdown, Vec<f64>)> {
        let xb = self.x.select_rows(idx);
        let yb: Vec<usize> = idx.iter().map(|&i| self.y[i]).collect();
        let (xin, lambdas) = if self.config.mixup_active() {
            let mut mc = self.config.mixup.clone();
            mc.k_neighbors = mc.k_neighbors.min(idx.len() - 1);
            let m = mixup_batch(&xb, &yb, self.model.num_classes, &mc, &mut self.mixup_rng)?;
            let l = m.lambdas();
            (m.x_mix, l)
        } else {
            (xb, Vec::new())
        };

        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, &self.params, true);
        let xv = g.constant(xin);
        let out = model_forward(&mut g, &self.params, &bound, xv, &self.model, Mode::Train)?;
        let centroids = bound.get("centroids");
        let h = hybrid_loss(&mut g, out.logits, out.embedding, &yb, centroids, &self.config.loss)?;
        if !h.breakdown.hybrid.is_finite() {
            return Err(Error::Numerical {
                epoch: self.epoch,
                batch,
                detail: format!("non-finite loss {:?}", h.breakdown),
            });
        }
        g.backward(h.loss)?;
        let grads: Vec<Vec<f64>> = bound
            .vars
            .iter()
            .map(|&(_, v)| {
                g.grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; g.value(v).len()])
            })
            .collect();
        let lr = self.config.schedule.lr(self.step, self.total_steps)?;
        self.opt.step(&mut self.params, &grads, lr)?;
        if let Some(r) = out.running {
            self.params.commit_running(r);
        }
        self.step += 1;
        Ok((h.breakdown, lambdas))
    }

    /// Runs one epoch and evaluates on `(x_eval, y_eval)`.
    pub fn run_epoch(&mut self, x_eval: &Tensor, y_eval: &[usize]) -> Result<EpochLog> {
        if self.finished() {
            return Err(Error::Config("all epochs already run".into()));
        }
        let n = self.y.len();
        let bs = self.config.batch_size;
        let mut order: Vec<usize> = (0..n).collect();
        rng::shuffle(&mut self.shuffle_rng, &mut order);
        let mut sum = LossBreakdown::default();
        let mut count = 0usize;
        let mut lambdas = Vec::new();
        for (b, chunk) in order.chunks(bs).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let epoch = self.epoch;
            let (l, lam) = self.batch_step(chunk, b).map_err(|e| numerical(epoch, b, e))?;
            sum.focal += l.focal;
            sum.intra += l.intra;
            sum.inter += l.inter;
            sum.fvl += l.fvl;
            sum.supcon += l.supcon;
            sum.triplet += l.triplet;
            sum.hybrid += l.hybrid;
            sum.triplets += l.triplets;
            sum.supcon_empty |= l.supcon_empty;
            lambdas.extend(lam);
            count += 1;
        }
        let c = count as f64;
        for v in [
            &mut sum.focal,
            &mut sum.intra,
            &mut sum.inter,
            &mut sum.fvl,
            &mut sum.supcon,
            &mut sum.triplet,
            &mut sum.hybrid,
        ] {
            *v /= c;
        }
        let lr = self.config.schedule.lr(self.step - 1, self.total_steps)?;
        let eval = evaluate(&self.params, &self.model, x_eval, y_eval)?;
        let log = EpochLog {
            epoch: self.epoch,
            lr,
            loss: sum,
            eval,
            lambdas: lambdas.len(),
            mean_lambda: if lambdas.is_empty() {
                0.0
            } else {
                lambdas.iter().sum::<f64>() / lambdas.len() as f64
            },
        };
        self.epoch += 1;
        Ok(log)
    }
}

pub struct TrainOutcome {
    pub model: ModelConfig,
    /// Parameters from the epoch with the highest selection macro F1.
    pub best: ModelParams,
    pub last: ModelParams,
    pub history: TrainHistory,
}

impl TrainOutcome {
    pub fn best_log(&self) -> &EpochLog {
        &self.history.epochs[self.history.best_epoch]
    }
}

/// Trains for the configured epochs, selecting on `(x_eval, y_eval)`.
pub fn train(
    x_train: &Tensor,
    y_train: &[usize],
    x_eval: &Tensor,
    y_eval: &[usize],
    num_classes: usize,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut t = Trainer::new(x_train.clone(), y_train.to_vec(), num_classes, config.clone())?;
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, ModelParams)> = None;
    while !t.finished() {
        let log = t.run_epoch(x_eval, y_eval)?;
        let f1 = log.eval.macro_f1;
        log::debug!("epoch {} loss {:.5} maF1 {:.4}", log.epoch, log.loss.hybrid, f1);
        if best.as_ref().is_none_or(|(b, _)| f1 > *b) {
            best = Some((f1, t.params.clone()));
            history.best_epoch = history.epochs.len();
        }
        history.epochs.push(log);
    }
    let (_, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        model: t.model.clone(),
        best,
        last: t.params,
        history,
    })
}

/// Eval-mode predictions.
pub fn predict(params: &ModelParams, model: &ModelConfig, x: &Tensor) -> Result<Vec<usize>> {
    let (logits, _) = infer(params, model, x)?;
    Ok(argmax_rows(&logits))
}

pub fn evaluate(params: &ModelParams, model: &ModelConfig, x: &Tensor, y: &[usize]) -> Result<Metrics> {
    let pred = predict(params, model, x)?;
    evaluate_predictions(y, &pred, model.num_classes)
}

/// Result of training on a prepared dataset.
pub struct Fit {
    pub outcome: TrainOutcome,
    /// Metrics of the retained parameters on the test split.
    pub test: Metrics,
    /// Training rows actually used (all of train unless a validation subset
    /// was carved out).
    pub train_rows: usize,
}

/// Trains on a prepared split. Selection uses the test split, or a
/// validation subset of train when `val_fraction` is set.
pub fn fit(prep: &Prepared, config: &TrainConfig) -> Result<Fit> {
    let (xtr, ytr, xsel, ysel) = match config.val_fraction {
        None => (
            prep.x_train.clone(),
            prep.y_train.clone(),
            prep.x_test.clone(),
            prep.y_test.clone(),
        ),
        Some(f) => {
            let mut r = rng::stream(config.seed, Stream::Validation);
            let (tr, va) = stratified_indices(&prep.y_train, f, &mut r)?;
            if va.is_empty() {
                return Err(Error::Data("validation subset is empty".into()));
            }
            let pick = |idx: &[usize]| -> (Tensor, Vec<usize>) {
                (
                    prep.x_train.select_rows(idx),
                    idx.iter().map(|&i| prep.y_train[i]).collect(),
                )
            };
            let (a, b) = pick(&tr);
            let (c, d) = pick(&va);
            (a, b, c, d)
        }
    };
    let outcome = train(&xtr, &ytr, &xsel, &ysel, prep.num_classes, config)?;
    let test = evaluate(&outcome.best, &outcome.model, &prep.x_test, &prep.y_test)?;
    Ok(Fit {
        outcome,
        test,
        train_rows: ytr.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn separable(n: usize, seed: u64) -> (Tensor, Vec<usize>) {
        let mut r = rng::seeded(seed);
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let c = i % 2;
            let s = if c == 0 { -1.5 } else { 1.5 };
            rows.push(vec![s + rng::unit(&mut r) - 0.5, rng::unit(&mut r) * 2.0 - 1.0]);
            y.push(c);
        }
        (Tensor::from_rows(&rows).unwrap(), y)
    }

    fn quick(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            ..Default::default()
        }
    }

    #[test]
    fn batch_count_keeps_tail_of_two() {
        assert_eq!(batches(130, 64), 3);
        assert_eq!(batches(129, 64), 2);
        assert_eq!(batches(128, 64), 2);
        assert_eq!(batches(1, 64), 0);
    }

    #[test]
    fn learns_separable_toy_set() {
        let (x, y) = separable(200, 1);
        let out = train(&x, &y, &x, &y, 2, &quick(50)).unwrap();
        let acc = evaluate(&out.best, &out.model, &x, &y).unwrap().accuracy;
        assert_eq!(acc, 1.0);
        let h = &out.history.epochs;
        assert!(h[49].loss.hybrid < h[0].loss.hybrid);
        let best = out.history.best_epoch;
        assert!(h.iter().all(|e| e.eval.macro_f1 <= h[best].eval.macro_f1));
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let (x, y) = separable(90, 2);
        let a = train(&x, &y, &x, &y, 2, &quick(3)).unwrap();
        let b = train(&x, &y, &x, &y, 2, &quick(3)).unwrap();
        assert_eq!(crate::checkpoint::to_string(&a.best), crate::checkpoint::to_string(&b.best));
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn no_mixup_draws_no_lambdas() {
        let (x, y) = separable(70, 3);
        let mut cfg = quick(2);
        cfg.ablation.use_mixup = false;
        let out = train(&x, &y, &x, &y, 2, &cfg).unwrap();
        assert!(out.history.epochs.iter().all(|e| e.lambdas == 0));
        let full = train(&x, &y, &x, &y, 2, &quick(2)).unwrap();
        assert_eq!(full.history.epochs[0].lambdas, 70);
    }

    #[test]
    fn disabled_mixup_config_matches_ablation() {
        let (x, y) = separable(70, 4);
        let mut a = quick(2);
        a.ablation.use_mixup = false;
        let mut b = quick(2);
        b.mixup.enabled = false;
        let ra = train(&x, &y, &x, &y, 2, &a).unwrap();
        let rb = train(&x, &y, &x, &y, 2, &b).unwrap();
        assert_eq!(ra.best, rb.best);
    }

    #[test]
    fn rejects_bad_config() {
        let (x, y) = separable(10, 5);
        let mut c = quick(0);
        assert!(Trainer::new(x.clone(), y.clone(), 2, c.clone()).is_err());
        c.epochs = 1;
        c.batch_size = 1;
        assert!(Trainer::new(x.clone(), y.clone(), 2, c).is_err());
        assert!(Trainer::new(x, vec![0, 5, 0, 0, 0, 0, 0, 0, 0, 0], 2, quick(1)).is_err());
    }

    #[test]
    fn ablated_model_is_a_plain_mlp() {
        // with every component ablated the forward pass must equal a direct
        // fc/bn/leaky stack built from the same arrays
        use crate::autodiff::RunningStats;
        let mut cfg = ModelConfig::new(3, 2);
        cfg.ablation = Ablation {
            use_quantum: false,
            use_mixup: false,
            use_attention: false,
        };
        let p = ModelParams::init_seeded(&cfg, 3).unwrap();
        let mut rg = rng::seeded(6);
        let x = Tensor::matrix(12, 3, (0..36).map(|_| rng::unit(&mut rg) * 2.0 - 1.0).collect()).unwrap();
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, &p, true);
        let xv = g.constant(x.clone());
        let out = model_forward(&mut g, &p, &bound, xv, &cfg, Mode::Train).unwrap();

        let mut r = Graph::new();
        let c = |r: &mut Graph, t: &Tensor| r.constant(t.clone());
        let xi = c(&mut r, &x);
        let mut h = xi;
        for (lin, bn) in [(&p.fc1, &p.bn1), (&p.fc2, &p.bn2)] {
            let w = c(&mut r, &lin.weight);
            let b = c(&mut r, &lin.bias);
            let z = r.matmul(h, w).unwrap();
            let z = r.add_row(z, b).unwrap();
            let gm = c(&mut r, &bn.gamma);
            let bt = c(&mut r, &bn.beta);
            let (mut m, mut v) = (bn.running_mean.data().to_vec(), bn.running_var.data().to_vec());
            let z = r
                .batchnorm(z, gm, bt, RunningStats { mean: &mut m, var: &mut v, momentum: 0.1, eps: 1e-5 }, Mode::Train)
                .unwrap();
            h = r.leaky_relu(z, 0.01).unwrap();
        }
        let w = c(&mut r, &p.fc3.weight);
        let b = c(&mut r, &p.fc3.bias);
        let logits = r.matmul(h, w).unwrap();
        let logits = r.add_row(logits, b).unwrap();
        assert_eq!(g.value(out.logits), r.value(logits));
    }

    #[test]
    fn validation_fraction_uses_subset() {
        let (x, y) = separable(100, 7);
        let ds = crate::data::Dataset {
            name: "toy".into(),
            x,
            y,
            labels: vec!["a".into(), "b".into()],
            feature_names: vec!["u".into(), "v".into()],
            dropped_rows: 0,
        };
        let prep = crate::data::prepare(&ds, 0.2, 42).unwrap();
        let mut cfg = quick(2);
        cfg.val_fraction = Some(0.25);
        let fit = fit(&prep, &cfg).unwrap();
        assert_eq!(fit.train_rows, 60);
        cfg.val_fraction = Some(1.5);
        assert!(super::fit(&prep, &cfg).is_err());
    }
}
