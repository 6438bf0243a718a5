//! Confusion matrices and macro-averaged classification metrics.

use crate::error::{Error, Result};

/// `counts[t][p]`: samples of true class `t` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(y_true: &[usize], y_pred: &[usize], classes: usize) -> Result<Self> {
        if y_true.len() != y_pred.len() {
            return Err(Error::shape(
                "confusion_matrix",
                format!("{} labels vs {} predictions", y_true.len(), y_pred.len()),
            ));
        }
        let mut counts = vec![vec![0u64; classes]; classes];
        for (&t, &p) in y_true.iter().zip(y_pred) {
            for l in [t, p] {
                if l >= classes {
                    return Err(Error::LabelOutOfRange { label: l, classes });
                }
            }
            counts[t][p] += 1;
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn support(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn predicted(&self) -> Vec<u64> {
        (0..self.classes())
            .map(|p| self.counts.iter().map(|r| r[p]).sum())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    /// Harmonic mean of macro precision and macro recall.
    pub macro_f1: f64,
}

impl Metrics {
    pub const NAMES: [&'static str; 4] = ["accuracy", "maP", "maR", "maF1"];

    pub fn values(&self) -> [f64; 4] {
        [
            self.accuracy,
            self.macro_precision,
            self.macro_recall,
            self.macro_f1,
        ]
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        Self::NAMES
            .iter()
            .position(|n| *n == name)
            .map(|i| self.values()[i])
    }
}

/// Metrics plus the classes whose precision or recall hit 0/0.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub metrics: Metrics,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub undefined_precision: Vec<usize>,
    pub undefined_recall: Vec<usize>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn macro_metrics(cm: &ConfusionMatrix) -> MetricReport {
    let c = cm.classes();
    let support = cm.support();
    let predicted = cm.predicted();
    let mut report = MetricReport {
        metrics: Metrics::default(),
        precision: Vec::with_capacity(c),
        recall: Vec::with_capacity(c),
        undefined_precision: Vec::new(),
        undefined_recall: Vec::new(),
    };
    let mut trace = 0;
    for k in 0..c {
        let tp = cm.counts[k][k];
        trace += tp;
        let p = ratio(tp, predicted[k]).unwrap_or_else(|| {
            report.undefined_precision.push(k);
            0.0
        });
        let r = ratio(tp, support[k]).unwrap_or_else(|| {
            report.undefined_recall.push(k);
            0.0
        });
        report.precision.push(p);
        report.recall.push(r);
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let map = mean(&report.precision);
    let mar = mean(&report.recall);
    report.metrics = Metrics {
        accuracy: ratio(trace, cm.total()).unwrap_or(0.0),
        macro_precision: map,
        macro_recall: mar,
        macro_f1: if map + mar > 0.0 {
            2.0 * map * mar / (map + mar)
        } else {
            0.0
        },
    };
    report
}

pub fn evaluate_predictions(y_true: &[usize], y_pred: &[usize], classes: usize) -> Result<Metrics> {
    Ok(macro_metrics(&ConfusionMatrix::new(y_true, y_pred, classes)?).metrics)
}
