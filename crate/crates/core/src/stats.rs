//! Friedman rank test with tie correction and the Iman–Davenport F
//! statistic, for comparing several models over repeated measures.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use statrs::distribution::{ContinuousCDF, FisherSnedecor};
use statrs::function::gamma::checked_gamma_ur;

use crate::error::{Error, Result};

/// Ranks per repeated measure (rows) and model (columns).
#[derive(Clone, Debug, PartialEq)]
pub struct RankMatrix {
    pub ranks: Vec<Vec<f64>>,
    /// Sum of `t^3 - t` over every group of tied values in every row.
    pub tie_term: f64,
}

impl RankMatrix {
    /// Uses the given rows as ranks unchanged; ties are groups of exactly
    /// equal values.
    pub fn from_ranks(rows: Vec<Vec<f64>>) -> Result<Self> {
        check_rect(&rows)?;
        let tie_term = rows.iter().map(|r| row_ties(r)).sum();
        Ok(RankMatrix {
            ranks: rows,
            tie_term,
        })
    }

    pub fn n(&self) -> usize {
        self.ranks.len()
    }

    pub fn k(&self) -> usize {
        self.ranks.first().map_or(0, Vec::len)
    }

    pub fn mean_ranks(&self) -> Vec<f64> {
        let n = self.n() as f64;
        (0..self.k())
            .map(|j| self.ranks.iter().map(|r| r[j]).sum::<f64>() / n)
            .collect()
    }
}

fn check_rect(rows: &[Vec<f64>]) -> Result<()> {
    let k = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != k) {
        return Err(Error::shape("friedman", "rows have different lengths"));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "friedman" });
    }
    Ok(())
}

fn row_ties(row: &[f64]) -> f64 {
    let mut v = row.to_vec();
    v.sort_by(f64::total_cmp);
    let mut t = 0.0;
    let mut i = 0;
    while i < v.len() {
        let mut j = i + 1;
        while j < v.len() && v[j] == v[i] {
            j += 1;
        }
        let size = (j - i) as f64;
        t += size * size * size - size;
        i = j;
    }
    t
}

/// Ranks each row: best gets 1, tied values share the mean of their
/// positions.
pub fn rank_row(scores: &[f64], higher_is_better: bool) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        let c = scores[a].total_cmp(&scores[b]);
        if higher_is_better {
            c.reverse()
        } else {
            c
        }
    });
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // positions i..j hold ranks i+1..=j
        let avg = (i + 1 + j) as f64 / 2.0;
        for &o in &order[i..j] {
            ranks[o] = avg;
        }
        i = j;
    }
    ranks
}

pub fn rank_models(scores: &[Vec<f64>], higher_is_better: bool) -> Result<RankMatrix> {
    check_rect(scores)?;
    let ranks = scores
        .iter()
        .map(|r| rank_row(r, higher_is_better))
        .collect();
    RankMatrix::from_ranks(ranks)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Reject,
    FailToReject,
}

impl std::fmt::Display for Decision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Decision::Reject => "Reject",
            Decision::FailToReject => "Fail to reject",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FriedmanResult {
    pub n: usize,
    pub k: usize,
    pub chi2: f64,
    /// `chi2 / c`; equals `chi2` when `c` is 0 (every row fully tied).
    pub chi2_corrected: f64,
    pub c: f64,
    /// Iman–Davenport statistic; infinite when `N(k-1) <= chi2`.
    pub f_f: f64,
    pub f_f_undefined: bool,
    pub df1: usize,
    pub df2: usize,
    pub mean_ranks: Vec<f64>,
    /// Upper chi-square tail of `chi2_corrected` with `k - 1` degrees.
    pub p_value: f64,
}

impl FriedmanResult {
    /// Iman–Davenport decision against the F critical value at `alpha`.
    pub fn decide_f(&self, alpha: f64) -> Result<(f64, Decision)> {
        let crit = f_critical(alpha, self.df1 as f64, self.df2 as f64)?;
        let d = if self.f_f > crit {
            Decision::Reject
        } else {
            Decision::FailToReject
        };
        Ok((crit, d))
    }

    pub fn decide_p(&self, alpha: f64) -> Decision {
        if self.p_value < alpha {
            Decision::Reject
        } else {
            Decision::FailToReject
        }
    }
}

pub fn friedman_test(ranks: &RankMatrix) -> Result<FriedmanResult> {
    let (n, k) = (ranks.n(), ranks.k());
    if n < 2 || k < 2 {
        return Err(Error::Data(format!(
            "Friedman test needs at least 2 measures and 2 models, got {n} x {k}"
        )));
    }
    let (nf, kf) = (n as f64, k as f64);
    let mean_ranks = ranks.mean_ranks();
    let ss: f64 = mean_ranks.iter().map(|r| r * r).sum();
    let chi2 = 12.0 * nf / (kf * (kf + 1.0)) * ss - 3.0 * nf * (kf + 1.0);
    let c = 1.0 - ranks.tie_term / (nf * kf * (kf * kf - 1.0));
    let chi2_corrected = if c > 0.0 { chi2 / c } else { chi2 };
    let denom = nf * (kf - 1.0) - chi2;
    let (f_f, f_f_undefined) = if denom > 0.0 {
        ((nf - 1.0) * chi2 / denom, false)
    } else {
        (f64::INFINITY, true)
    };
    Ok(FriedmanResult {
        n,
        k,
        chi2,
        chi2_corrected,
        c,
        f_f,
        f_f_undefined,
        df1: k - 1,
        df2: (k - 1) * (n - 1),
        mean_ranks,
        p_value: chi2_sf(chi2_corrected.max(0.0), (k - 1) as f64)?,
    })
}

/// Upper tail of the chi-square distribution, `Q(df/2, x/2)`.
pub fn chi2_sf(x: f64, df: f64) -> Result<f64> {
    if !(df > 0.0) || x.is_nan() || x < 0.0 {
        return Err(Error::Domain {
            op: "chi2_sf",
            value: if x.is_nan() || x < 0.0 { x } else { df },
        });
    }
    if x == 0.0 {
        return Ok(1.0);
    }
    if x.is_infinite() {
        return Ok(0.0);
    }
    checked_gamma_ur(df / 2.0, x / 2.0).map_err(|_| Error::Domain {
        op: "chi2_sf",
        value: x,
    })
}

/// Upper `alpha` critical value of `F(df1, df2)`.
pub fn f_critical(alpha: f64, df1: f64, df2: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain {
            op: "f_critical",
            value: alpha,
        });
    }
    let f = FisherSnedecor::new(df1, df2).map_err(|_| Error::Domain {
        op: "f_critical",
        value: df1.min(df2),
    })?;
    // bracket then bisect on the upper tail; the library quantile loses
    // accuracy for large denominator degrees of freedom
    let target = 1.0 - alpha;
    let (mut lo, mut hi) = (0.0, 1.0);
    while f.cdf(hi) < target {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f.cdf(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-14 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// How the global test turns per-metric mean ranks into rank rows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GlobalMode {
    /// Each metric's mean-rank vector is used directly as one row.
    #[default]
    MeanRanks,
    /// Each metric's mean-rank vector is re-ranked to 1..k first.
    Reranked,
}

pub fn global_test(per_metric_mean_ranks: &[Vec<f64>], mode: GlobalMode) -> Result<FriedmanResult> {
    let rows = match mode {
        GlobalMode::MeanRanks => RankMatrix::from_ranks(per_metric_mean_ranks.to_vec())?,
        GlobalMode::Reranked => rank_models(per_metric_mean_ranks, false)?,
    };
    friedman_test(&rows)
}

/// One `dataset,model,metric,value` line.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub dataset: String,
    pub model: String,
    pub metric: String,
    pub value: f64,
}

pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<ResultRow>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    parse_results(file)
}

pub fn parse_results<R: std::io::Read>(reader: R) -> Result<Vec<ResultRow>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let want = ["dataset", "model", "metric", "value"];
    let idx: Vec<usize> = want
        .iter()
        .map(|w| {
            header.iter().position(|h| h == w).ok_or_else(|| {
                Error::Data(format!("results file lacks a `{w}` column (header {header:?})"))
            })
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let cell = |i: usize| rec.get(idx[i]).unwrap_or("").to_string();
        let value: f64 = cell(3).parse().map_err(|_| {
            Error::Data(format!("results line {}: bad value `{}`", n + 2, cell(3)))
        })?;
        out.push(ResultRow {
            dataset: cell(0),
            model: cell(1),
            metric: cell(2),
            value,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricTest {
    pub metric: String,
    pub result: FriedmanResult,
    pub decision: Decision,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StatsReport {
    pub models: Vec<String>,
    pub datasets: Vec<String>,
    pub per_metric: Vec<MetricTest>,
    pub global: FriedmanResult,
    pub global_critical: f64,
    pub global_decision: Decision,
    pub alpha: f64,
}

/// Per-metric tie-corrected Friedman tests (decision by p-value) and a
/// global Iman–Davenport test over the metric-wise mean ranks (decision by
/// the F critical value). Higher metric values rank better. Repeated rows
/// for the same (dataset, model, metric), e.g. several seeds, are averaged.
pub fn analyze(rows: &[ResultRow], alpha: f64, mode: GlobalMode) -> Result<StatsReport> {
    let mut models: Vec<String> = Vec::new();
    let mut datasets: Vec<String> = Vec::new();
    let mut metrics: Vec<String> = Vec::new();
    let mut cells: BTreeMap<(String, String, String), (f64, usize)> = BTreeMap::new();
    for r in rows {
        for (list, v) in [(&mut models, &r.model), (&mut datasets, &r.dataset), (&mut metrics, &r.metric)] {
            if !list.contains(v) {
                list.push(v.clone());
            }
        }
        let e = cells
            .entry((r.metric.clone(), r.dataset.clone(), r.model.clone()))
            .or_insert((0.0, 0));
        e.0 += r.value;
        e.1 += 1;
    }
    if models.len() < 2 || datasets.len() < 2 {
        return Err(Error::Data(format!(
            "need at least 2 models and 2 datasets, got {} and {}",
            models.len(),
            datasets.len()
        )));
    }
    let mut per_metric = Vec::new();
    for m in &metrics {
        let mut scores = Vec::new();
        for d in &datasets {
            let row = models
                .iter()
                .map(|mo| {
                    cells
                        .get(&(m.clone(), d.clone(), mo.clone()))
                        .map(|(s, c)| s / *c as f64)
                        .ok_or_else(|| Error::Data(format!("missing result for {d} / {mo} / {m}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            scores.push(row);
        }
        let result = friedman_test(&rank_models(&scores, true)?)?;
        let decision = result.decide_p(alpha);
        per_metric.push(MetricTest {
            metric: m.clone(),
            result,
            decision,
        });
    }
    let means: Vec<Vec<f64>> = per_metric.iter().map(|t| t.result.mean_ranks.clone()).collect();
    let (global, global_critical, global_decision) = if means.len() >= 2 {
        let g = global_test(&means, mode)?;
        let (crit, dec) = g.decide_f(alpha)?;
        (g, crit, dec)
    } else {
        // a single metric: the global test is that metric's own test
        let g = per_metric[0].result.clone();
        let (crit, dec) = g.decide_f(alpha)?;
        (g, crit, dec)
    };
    Ok(StatsReport {
        models,
        datasets,
        per_metric,
        global,
        global_critical,
        global_decision,
        alpha,
    })
}

impl StatsReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let w = self.models.iter().map(String::len).max().unwrap_or(5).max(5);
        let _ = writeln!(
            s,
            "Friedman tests: {} models x {} datasets, alpha = {}",
            self.models.len(),
            self.datasets.len(),
            self.alpha
        );
        let _ = write!(s, "{:<w$}", "model");
        for t in &self.per_metric {
            let _ = write!(s, " {:>10}", t.metric);
        }
        let _ = writeln!(s);
        for (j, m) in self.models.iter().enumerate() {
            let _ = write!(s, "{m:<w$}");
            for t in &self.per_metric {
                let _ = write!(s, " {:>10.3}", t.result.mean_ranks[j]);
            }
            let _ = writeln!(s);
        }
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:<10} {:>10} {:>12} {:>12}  decision",
            "metric", "chi2", "chi2_corr", "p"
        );
        for t in &self.per_metric {
            let _ = writeln!(
                s,
                "{:<10} {:>10.4} {:>12.4} {:>12.4e}  {}",
                t.metric, t.result.chi2, t.result.chi2_corrected, t.result.p_value, t.decision
            );
        }
        let g = &self.global;
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "global: chi2 = {:.4}, F_F = {:.4}{} with df ({}, {}), critical {:.4} -> {}",
            g.chi2,
            g.f_f,
            if g.f_f_undefined { " (undefined)" } else { "" },
            g.df1,
            g.df2,
            self.global_critical,
            self.global_decision
        );
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,chi2,chi2_corrected,p,decision\n");
        for t in &self.per_metric {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                t.metric, t.result.chi2, t.result.chi2_corrected, t.result.p_value, t.decision
            );
        }
        let g = &self.global;
        let _ = writeln!(
            s,
            "global,{},{},{},{}",
            g.chi2,
            g.chi2_corrected,
            g.p_value,
            self.global_decision
        );
        s
    }
}
