//! Training objective.
//!
//! `hybrid = a * fvl + (1 - a) * (supcon + triplet)` where the focal variance
//! loss `fvl` is `mean(focal + beta1 * intra) + inter`. Every term is built on
//! the autodiff graph so one backward pass reaches logits, embeddings and
//! class centroids.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const NORM_FLOOR: f64 = 1e-12;
const PT_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub gamma: f64,
    pub beta1: f64,
    pub tau: f64,
    pub margin: f64,
    pub alpha: f64,
    pub miner_epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma: 3.0,
            beta1: 0.8,
            tau: 0.2,
            margin: 0.5,
            alpha: 0.5,
            miner_epsilon: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.gamma >= 0.0) {
            return bad("focal gamma must be >= 0");
        }
        if !(self.tau > 0.0) {
            return bad("temperature must be > 0");
        }
        if !(self.margin > 0.0) {
            return bad("triplet margin must be > 0");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("loss alpha must lie in [0, 1]");
        }
        if !(self.beta1 >= 0.0) {
            return bad("beta1 must be >= 0");
        }
        if self.miner_epsilon.is_nan() {
            return bad("miner epsilon is NaN");
        }
        Ok(())
    }
}

/// Scalar values of every loss term for one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub focal: f64,
    pub intra: f64,
    pub inter: f64,
    pub fvl: f64,
    pub supcon: f64,
    pub triplet: f64,
    pub hybrid: f64,
    /// Set when no anchor in the batch had a positive.
    pub supcon_empty: bool,
    pub triplets: usize,
}

fn check_labels(y: &[usize], rows: usize, classes: usize) -> Result<()> {
    if y.len() != rows {
        return Err(Error::shape(
            "loss",
            format!("{} labels for {rows} rows", y.len()),
        ));
    }
    match y.iter().find(|&&l| l >= classes) {
        Some(&label) => Err(Error::LabelOutOfRange { label, classes }),
        None => Ok(()),
    }
}

/// Per-sample focal terms `(1 - p_t)^gamma * CE`, shape `[B]`.
pub fn focal_terms(g: &mut Graph, logits: Var, y: &[usize], gamma: f64) -> Result<Var> {
    let (b, c) = g.value(logits).dims2("focal")?;
    check_labels(y, b, c)?;
    let logp = g.log_softmax(logits)?;
    let picked = g.pick_columns(logp, y)?;
    let ce = g.neg(picked)?;
    let neg_ce = g.neg(ce)?;
    let pt = g.exp(neg_ce)?;
    let pt = g.clamp(pt, PT_FLOOR, 1.0)?;
    let npt = g.neg(pt)?;
    let miss = g.add_scalar(npt, 1.0)?;
    let w = g.powf(miss, gamma)?;
    g.mul(w, ce)
}

pub fn focal_loss(g: &mut Graph, logits: Var, y: &[usize], gamma: f64) -> Result<Var> {
    let t = focal_terms(g, logits, y, gamma)?;
    g.mean(t)
}

/// Per-sample squared distance to the own-class centroid, shape `[B]`.
pub fn intra_terms(g: &mut Graph, emb: Var, y: &[usize], centroids: Var) -> Result<Var> {
    let (b, d) = g.value(emb).dims2("intra")?;
    let (c, cd) = g.value(centroids).dims2("intra")?;
    if cd != d {
        return Err(Error::shape(
            "intra",
            format!("embedding width {d}, centroid width {cd}"),
        ));
    }
    check_labels(y, b, c)?;
    let own = g.select_rows(centroids, y)?;
    let diff = g.sub(emb, own)?;
    let sq = g.square(diff)?;
    g.sum_axis(sq, 1)
}

pub fn intra_variance(g: &mut Graph, emb: Var, y: &[usize], centroids: Var) -> Result<Var> {
    let t = intra_terms(g, emb, y, centroids)?;
    g.mean(t)
}

/// Sorted distinct labels.
pub fn classes_present(y: &[usize]) -> Vec<usize> {
    let mut c = y.to_vec();
    c.sort_unstable();
    c.dedup();
    c
}

/// `-log sigmoid(mean pairwise centroid distance)` over the given classes;
/// zero when fewer than two classes are present.
pub fn inter_separation(g: &mut Graph, centroids: Var, classes: &[usize]) -> Result<Var> {
    let (c, _) = g.value(centroids).dims2("inter")?;
    if let Some(&label) = classes.iter().find(|&&k| k >= c) {
        return Err(Error::LabelOutOfRange { label, classes: c });
    }
    if classes.len() < 2 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let (mut left, mut right) = (Vec::new(), Vec::new());
    for &j in classes {
        for &k in classes {
            if j != k {
                left.push(j);
                right.push(k);
            }
        }
    }
    let a = g.select_rows(centroids, &left)?;
    let b = g.select_rows(centroids, &right)?;
    let diff = g.sub(a, b)?;
    let sq = g.square(diff)?;
    let d2 = g.sum_axis(sq, 1)?;
    let dist = g.sqrt(d2)?;
    let dbar = g.mean(dist)?;
    let s = g.sigmoid(dbar)?;
    let ls = g.log(s)?;
    g.neg(ls)
}

/// Focal variance loss and its three parts.
pub struct Fvl {
    pub total: Var,
    pub focal: Var,
    pub intra: Var,
    pub inter: Var,
}

pub fn focal_variance_loss(
    g: &mut Graph,
    logits: Var,
    y: &[usize],
    emb: Var,
    centroids: Var,
    config: &LossConfig,
) -> Result<Fvl> {
    let f = focal_terms(g, logits, y, config.gamma)?;
    let i = intra_terms(g, emb, y, centroids)?;
    let wi = g.scale(i, config.beta1)?;
    let per = g.add(f, wi)?;
    let m = g.mean(per)?;
    let inter = inter_separation(g, centroids, &classes_present(y))?;
    let total = g.add(m, inter)?;
    let focal = g.mean(f)?;
    let intra = g.mean(i)?;
    Ok(Fvl {
        total,
        focal,
        intra,
        inter,
    })
}

fn normalize_rows(g: &mut Graph, emb: Var) -> Result<Var> {
    let sq = g.square(emb)?;
    let n2 = g.sum_axis(sq, 1)?;
    let n = g.sqrt(n2)?;
    let n = g.clamp(n, NORM_FLOOR, f64::INFINITY)?;
    g.div_col(emb, n)
}

/// Supervised contrastive loss on L2-normalised embeddings. Anchors without
/// a positive are left out of the average; the flag is set when none has one
/// (the loss is then 0).
pub fn supcon_loss(g: &mut Graph, emb: Var, y: &[usize], tau: f64) -> Result<(Var, bool)> {
    let (b, _) = g.value(emb).dims2("supcon")?;
    if y.len() != b {
        return Err(Error::shape("supcon", "one label per row"));
    }
    let mut weights = vec![0.0; b * b];
    let mut anchors = 0usize;
    for i in 0..b {
        let pos: Vec<usize> = (0..b).filter(|&j| j != i && y[j] == y[i]).collect();
        if pos.is_empty() {
            continue;
        }
        anchors += 1;
        for j in &pos {
            weights[i * b + j] = 1.0 / pos.len() as f64;
        }
    }
    if anchors == 0 {
        return Ok((g.constant(Tensor::scalar(0.0)), true));
    }
    let z = normalize_rows(g, emb)?;
    let zt = g.transpose(z)?;
    let sim = g.matmul(z, zt)?;
    let sim = g.scale(sim, 1.0 / tau)?;
    let mask = (0..b * b).map(|k| k / b != k % b).collect();
    let logp = g.log_softmax_masked(sim, Some(mask))?;
    let w = g.constant(Tensor::matrix(b, b, weights)?);
    let weighted = g.mul(logp, w)?;
    let total = g.sum(weighted)?;
    Ok((g.scale(total, -1.0 / anchors as f64)?, false))
}

fn cosine_matrix(e: &Tensor) -> Vec<f64> {
    let (b, _) = (e.rows(), e.cols());
    let norms: Vec<f64> = (0..b)
        .map(|i| e.row(i).iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR))
        .collect();
    let mut s = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            let dot: f64 = e.row(i).iter().zip(e.row(j)).map(|(a, c)| a * c).sum();
            s[i * b + j] = dot / (norms[i] * norms[j]);
        }
    }
    s
}

/// Multi-similarity mining on cosine similarity. For each anchor keeps the
/// negatives more similar than its least similar positive minus `epsilon`
/// and the positives less similar than its most similar negative plus
/// `epsilon`, then emits all kept `(anchor, positive, negative)` triples in
/// lexicographic order.
pub fn ms_mine_triplets(emb: &Tensor, y: &[usize], epsilon: f64) -> Vec<(usize, usize, usize)> {
    let b = emb.rows();
    let sim = cosine_matrix(emb);
    let mut out = Vec::new();
    for a in 0..b {
        let s = &sim[a * b..(a + 1) * b];
        let pos: Vec<usize> = (0..b).filter(|&j| j != a && y[j] == y[a]).collect();
        let neg: Vec<usize> = (0..b).filter(|&j| y[j] != y[a]).collect();
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        let min_pos = pos.iter().map(|&p| s[p]).fold(f64::INFINITY, f64::min);
        let max_neg = neg.iter().map(|&n| s[n]).fold(f64::NEG_INFINITY, f64::max);
        let hard_neg: Vec<usize> = neg.into_iter().filter(|&n| s[n] > min_pos - epsilon).collect();
        for p in pos.into_iter().filter(|&p| s[p] < max_neg + epsilon) {
            for &n in &hard_neg {
                out.push((a, p, n));
            }
        }
    }
    out
}

/// Mean hinge `[|a-p|^2 - |a-n|^2 + margin]_+` on raw embeddings; 0 for no
/// triplets.
pub fn triplet_loss(
    g: &mut Graph,
    emb: Var,
    triplets: &[(usize, usize, usize)],
    margin: f64,
) -> Result<Var> {
    if triplets.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let pick = |f: fn(&(usize, usize, usize)) -> usize| triplets.iter().map(f).collect::<Vec<_>>();
    let ea = g.select_rows(emb, &pick(|t| t.0))?;
    let ep = g.select_rows(emb, &pick(|t| t.1))?;
    let en = g.select_rows(emb, &pick(|t| t.2))?;
    let dp = g.sub(ea, ep)?;
    let dp = g.square(dp)?;
    let dp = g.sum_axis(dp, 1)?;
    let dn = g.sub(ea, en)?;
    let dn = g.square(dn)?;
    let dn = g.sum_axis(dn, 1)?;
    let gap = g.sub(dp, dn)?;
    let gap = g.add_scalar(gap, margin)?;
    let h = g.relu(gap)?;
    g.mean(h)
}

pub struct HybridLoss {
    pub loss: Var,
    pub breakdown: LossBreakdown,
}

/// Full objective against the original (unmixed) labels.
pub fn hybrid_loss(
    g: &mut Graph,
    logits: Var,
    emb: Var,
    y: &[usize],
    centroids: Var,
    config: &LossConfig,
) -> Result<HybridLoss> {
    let triplets = ms_mine_triplets(g.value(emb), y, config.miner_epsilon);
    hybrid_loss_with_triplets(g, logits, emb, y, centroids, config, &triplets)
}

/// [`hybrid_loss`] with the mined triplets supplied by the caller.
pub fn hybrid_loss_with_triplets(
    g: &mut Graph,
    logits: Var,
    emb: Var,
    y: &[usize],
    centroids: Var,
    config: &LossConfig,
    triplets: &[(usize, usize, usize)],
) -> Result<HybridLoss> {
    let fvl = focal_variance_loss(g, logits, y, emb, centroids, config)?;
    let (sc, supcon_empty) = supcon_loss(g, emb, y, config.tau)?;
    let tl = triplet_loss(g, emb, triplets, config.margin)?;
    let metric = g.add(sc, tl)?;
    let a = g.scale(fvl.total, config.alpha)?;
    let b = g.scale(metric, 1.0 - config.alpha)?;
    let loss = g.add(a, b)?;
    let v = |g: &Graph, x: Var| g.value(x).item();
    let breakdown = LossBreakdown {
        focal: v(g, fvl.focal),
        intra: v(g, fvl.intra),
        inter: v(g, fvl.inter),
        fvl: v(g, fvl.total),
        supcon: v(g, sc),
        triplet: v(g, tl),
        hybrid: v(g, loss),
        supcon_empty,
        triplets: triplets.len(),
    };
    Ok(HybridLoss { loss, breakdown })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn rand_t(seed: u64, r: usize, c: usize, s: f64) -> Tensor {
        let mut g = rng::seeded(seed);
        Tensor::matrix(r, c, (0..r * c).map(|_| (rng::unit(&mut g) * 2.0 - 1.0) * s).collect()).unwrap()
    }

    fn labels(seed: u64, b: usize, c: usize) -> Vec<usize> {
        let mut g = rng::seeded(seed);
        (0..b).map(|_| rng::index(&mut g, c)).collect()
    }

    fn scalar(f: impl FnOnce(&mut Graph) -> Var) -> f64 {
        let mut g = Graph::new();
        let v = f(&mut g);
        g.value(v).item()
    }

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn focal_examples() {
        let v = scalar(|g| {
            let l = g.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
            focal_loss(g, l, &[0], 3.0).unwrap()
        });
        assert_abs_diff_eq!(v, 0.125 * 2f64.ln(), epsilon = 1e-15);
        let v = scalar(|g| {
            let l = g.constant(Tensor::matrix(1, 2, vec![60.0, -60.0]).unwrap());
            focal_loss(g, l, &[0], 3.0).unwrap()
        });
        assert!(v < 1e-40);
        let mut g = Graph::new();
        let l = g.constant(Tensor::zeros(&[1, 2]));
        assert!(matches!(
            focal_loss(&mut g, l, &[2], 3.0),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn focal_gamma_zero_is_cross_entropy() {
        let x = rand_t(1, 12, 4, 3.0);
        let y = labels(2, 12, 4);
        let v = scalar(|g| {
            let l = g.constant(x.clone());
            focal_loss(g, l, &y, 0.0).unwrap()
        });
        let mut ce = 0.0;
        for i in 0..12 {
            let row = x.row(i);
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            ce += lse - row[y[i]];
        }
        assert_abs_diff_eq!(v, ce / 12.0, epsilon = 1e-12);
    }

    #[test]
    fn intra_examples_and_oracle() {
        let v = scalar(|g| {
            let e = g.constant(Tensor::matrix(1, 2, vec![2.0, 0.0]).unwrap());
            let c = g.constant(Tensor::zeros(&[2, 2]));
            intra_variance(g, e, &[1], c).unwrap()
        });
        assert_eq!(v, 4.0);
        let e = rand_t(3, 10, 8, 1.0);
        let c = rand_t(4, 3, 8, 1.0);
        let y = labels(5, 10, 3);
        let v = scalar(|g| {
            let ev = g.constant(e.clone());
            let cv = g.constant(c.clone());
            intra_variance(g, ev, &y, cv).unwrap()
        });
        let mut s = 0.0;
        for i in 0..10 {
            for k in 0..8 {
                s += (e.get2(i, k) - c.get2(y[i], k)).powi(2);
            }
        }
        assert_abs_diff_eq!(v, s / 10.0, epsilon = 1e-12);
    }

    #[test]
    fn inter_examples() {
        let coincident = scalar(|g| {
            let c = g.constant(Tensor::zeros(&[3, 2]));
            inter_separation(g, c, &[0, 2]).unwrap()
        });
        assert_abs_diff_eq!(coincident, 2f64.ln(), epsilon = 1e-15);
        let unit = scalar(|g| {
            let c = g.constant(Tensor::matrix(2, 2, vec![0.0, 0.0, 1.0, 0.0]).unwrap());
            inter_separation(g, c, &[0, 1]).unwrap()
        });
        assert_abs_diff_eq!(unit, -sigmoid(1.0).ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(unit, 0.3133, epsilon = 1e-4);
        let one = scalar(|g| {
            let c = g.constant(Tensor::zeros(&[3, 2]));
            inter_separation(g, c, &[1]).unwrap()
        });
        assert_eq!(one, 0.0);
        let far = scalar(|g| {
            let c = g.constant(Tensor::matrix(2, 1, vec![0.0, 60.0]).unwrap());
            inter_separation(g, c, &[0, 1]).unwrap()
        });
        assert!(far < 1e-25 && far < unit);
    }

    fn fvl_oracle(x: &Tensor, e: &Tensor, c: &Tensor, y: &[usize], cfg: &LossConfig) -> f64 {
        let b = x.rows();
        let mut per = 0.0;
        for i in 0..b {
            let row = x.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            let ce = lse - row[y[i]];
            let pt = (-ce).exp().clamp(1e-12, 1.0);
            let focal = (1.0 - pt).powf(cfg.gamma) * ce;
            let intra: f64 = (0..e.cols()).map(|k| (e.get2(i, k) - c.get2(y[i], k)).powi(2)).sum();
            per += focal + cfg.beta1 * intra;
        }
        let cls = classes_present(y);
        let mut dsum = 0.0;
        let mut n = 0;
        for &j in &cls {
            for &k in &cls {
                if j != k {
                    dsum += (0..c.cols()).map(|t| (c.get2(j, t) - c.get2(k, t)).powi(2)).sum::<f64>().sqrt();
                    n += 1;
                }
            }
        }
        let inter = if n == 0 { 0.0 } else { -sigmoid(dsum / n as f64).ln() };
        per / b as f64 + inter
    }

    #[test]
    fn fvl_matches_oracle_and_recombines() {
        let cfg = LossConfig::default();
        for seed in 0..20 {
            let x = rand_t(seed, 16, 3, 2.0);
            let e = rand_t(seed + 100, 16, 8, 1.0);
            let c = rand_t(seed + 200, 3, 8, 0.3);
            let y = labels(seed + 300, 16, 3);
            let mut g = Graph::new();
            let (xv, ev, cv) = (g.constant(x.clone()), g.constant(e.clone()), g.constant(c.clone()));
            let f = focal_variance_loss(&mut g, xv, &y, ev, cv, &cfg).unwrap();
            let total = g.value(f.total).item();
            assert_abs_diff_eq!(total, fvl_oracle(&x, &e, &c, &y, &cfg), epsilon = 1e-10);
            let parts = g.value(f.focal).item() + cfg.beta1 * g.value(f.intra).item() + g.value(f.inter).item();
            assert_abs_diff_eq!(total, parts, epsilon = 1e-12);
        }
    }

    #[test]
    fn fvl_single_class_zero_beta_is_focal() {
        let cfg = LossConfig {
            beta1: 0.0,
            ..Default::default()
        };
        let x = rand_t(9, 6, 2, 1.0);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let ev = g.constant(Tensor::zeros(&[6, 8]));
        let cv = g.constant(Tensor::zeros(&[2, 8]));
        let f = focal_variance_loss(&mut g, xv, &[1; 6], ev, cv, &cfg).unwrap();
        assert_eq!(g.value(f.total).item(), g.value(f.focal).item());
        assert_eq!(g.value(f.inter).item(), 0.0);
    }

    pub(crate) fn supcon_oracle(e: &Tensor, y: &[usize], tau: f64) -> f64 {
        let b = e.rows();
        let z: Vec<Vec<f64>> = (0..b)
            .map(|i| {
                let n = e.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                e.row(i).iter().map(|v| v / n).collect()
            })
            .collect();
        let dot = |i: usize, j: usize| z[i].iter().zip(&z[j]).map(|(a, c)| a * c).sum::<f64>() / tau;
        let mut total = 0.0;
        let mut anchors = 0;
        for i in 0..b {
            let pos: Vec<usize> = (0..b).filter(|&p| p != i && y[p] == y[i]).collect();
            if pos.is_empty() {
                continue;
            }
            anchors += 1;
            let denom: f64 = (0..b).filter(|&a| a != i).map(|a| dot(i, a).exp()).sum();
            let s: f64 = pos.iter().map(|&p| (dot(i, p).exp() / denom).ln()).sum();
            total += -s / pos.len() as f64;
        }
        if anchors == 0 {
            0.0
        } else {
            total / anchors as f64
        }
    }

    #[test]
    fn supcon_examples() {
        let mut g = Graph::new();
        let e = g.constant(rand_t(1, 2, 8, 1.0));
        let (v, flag) = supcon_loss(&mut g, e, &[0, 1], 0.2).unwrap();
        assert!(flag);
        assert_eq!(g.value(v).item(), 0.0);

        let row = vec![0.3, -0.2, 0.5];
        let e = g.constant(Tensor::from_rows(&[row.clone(), row]).unwrap());
        let (v, flag) = supcon_loss(&mut g, e, &[1, 1], 0.2).unwrap();
        assert!(!flag);
        assert_abs_diff_eq!(g.value(v).item(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn supcon_matches_double_loop_and_is_scale_invariant() {
        for seed in 0..20 {
            let e = rand_t(seed, 8, 8, 1.0);
            let y = labels(seed + 50, 8, 3);
            let v = scalar(|g| {
                let ev = g.constant(e.clone());
                supcon_loss(g, ev, &y, 0.2).unwrap().0
            });
            assert_abs_diff_eq!(v, supcon_oracle(&e, &y, 0.2), epsilon = 1e-10);
            assert!(v >= 0.0);
            for k in [0.5, 2.0, 10.0] {
                let scaled = Tensor::matrix(8, 8, e.data().iter().map(|x| x * k).collect()).unwrap();
                let w = scalar(|g| {
                    let ev = g.constant(scaled);
                    supcon_loss(g, ev, &y, 0.2).unwrap().0
                });
                assert_abs_diff_eq!(v, w, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn miner_examples() {
        // two tight, well separated clusters
        let e = Tensor::from_rows(&[
            vec![1.0, 0.0],
            vec![0.99, 0.01],
            vec![0.98, 0.02],
            vec![0.0, 1.0],
            vec![0.01, 0.99],
            vec![0.02, 0.98],
        ])
        .unwrap();
        let y = [0, 0, 0, 1, 1, 1];
        assert!(ms_mine_triplets(&e, &y, 0.05).is_empty());

        // point 2 is labeled 1 but sits in the class-0 cluster
        let y_bad = [0, 0, 1, 1, 1, 1];
        let t = ms_mine_triplets(&e, &y_bad, 0.1);
        assert!(t.contains(&(0, 1, 2)));
        assert!(t.contains(&(1, 0, 2)));
        assert!(t.windows(2).all(|w| w[0] < w[1]));

        let all = ms_mine_triplets(&e, &y, f64::INFINITY);
        assert_eq!(all.len(), 6 * 2 * 3);
    }

    #[test]
    fn triplet_examples_and_oracle() {
        let mut g = Graph::new();
        let e = g.constant(Tensor::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap());
        let v = triplet_loss(&mut g, e, &[(0, 1, 2)], 0.5).unwrap();
        assert_eq!(g.value(v).item(), 0.0);
        let e = g.constant(Tensor::zeros(&[3, 2]));
        let v = triplet_loss(&mut g, e, &[(0, 1, 2)], 0.5).unwrap();
        assert_eq!(g.value(v).item(), 0.5);
        let v = triplet_loss(&mut g, e, &[], 0.5).unwrap();
        assert_eq!(g.value(v).item(), 0.0);

        let et = rand_t(7, 10, 8, 1.0);
        let y = labels(8, 10, 2);
        let trip = ms_mine_triplets(&et, &y, f64::INFINITY);
        let ev = g.constant(et.clone());
        let v = triplet_loss(&mut g, ev, &trip, 0.5).unwrap();
        let d = |i: usize, j: usize| (0..8).map(|k| (et.get2(i, k) - et.get2(j, k)).powi(2)).sum::<f64>();
        let want = trip.iter().map(|&(a, p, n)| (d(a, p) - d(a, n) + 0.5).max(0.0)).sum::<f64>()
            / trip.len() as f64;
        assert_abs_diff_eq!(g.value(v).item(), want, epsilon = 1e-12);
    }

    fn hybrid_value(alpha: f64, seed: u64) -> LossBreakdown {
        let cfg = LossConfig {
            alpha,
            ..Default::default()
        };
        let mut g = Graph::new();
        let x = g.constant(rand_t(seed, 16, 2, 2.0));
        let e = g.constant(rand_t(seed + 1, 16, 8, 1.0));
        let c = g.constant(rand_t(seed + 2, 2, 8, 0.1));
        let y = labels(seed + 3, 16, 2);
        hybrid_loss(&mut g, x, e, &y, c, &cfg).unwrap().breakdown
    }

    #[test]
    fn hybrid_mixing() {
        let one = hybrid_value(1.0, 4);
        assert_eq!(one.hybrid, one.fvl);
        let zero = hybrid_value(0.0, 4);
        assert_eq!(zero.hybrid, zero.supcon + zero.triplet);
        let half = hybrid_value(0.5, 4);
        assert_abs_diff_eq!(half.hybrid, 0.5 * (one.hybrid + zero.hybrid), epsilon = 1e-12);
        assert_abs_diff_eq!(half.hybrid, 0.5 * half.fvl + 0.5 * (half.supcon + half.triplet), epsilon = 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn components_are_non_negative(seed in any::<u64>()) {
            let b = hybrid_value(0.5, seed);
            for v in [b.focal, b.intra, b.inter, b.fvl, b.supcon, b.triplet, b.hybrid] {
                prop_assert!(v.is_finite() && v >= 0.0);
            }
        }
    }
}
