//! In-batch neighbor-guided mixup.
//!
//! Each anchor is interpolated with one of its `k` nearest neighbors in the
//! same batch (Euclidean distance on the standardized inputs), keeping the
//! anchor coefficient at or above one half. The loss keeps using the original
//! labels; soft labels are produced only for inspection.

use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct MixupConfig {
    /// Concentration of the symmetric Beta distribution.
    pub alpha: f64,
    pub k_neighbors: usize,
    pub enabled: bool,
}

impl Default for MixupConfig {
    fn default() -> Self {
        MixupConfig {
            alpha: 0.4,
            k_neighbors: 5,
            enabled: true,
        }
    }
}

impl MixupConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "mixup alpha must be positive, got {}",
                self.alpha
            )));
        }
        if self.k_neighbors == 0 {
            return Err(Error::Config("mixup needs k_neighbors >= 1".into()));
        }
        Ok(())
    }
}

/// How the interpolation partner of each anchor is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Partner {
    /// Uniformly among the anchor's k nearest neighbors.
    Nearest,
    /// Uniformly among all other rows of the batch.
    Random,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixedBatch {
    pub x_mix: Tensor,
    pub y_orig: Vec<usize>,
    /// `[B, C]` soft labels against a permutation partner.
    pub y_mix: Tensor,
    /// Per-row `(anchor, partner, lambda')`. Empty when mixup is disabled.
    pub log: Vec<MixRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixRecord {
    pub anchor: usize,
    pub partner: usize,
    pub lambda: f64,
}

impl MixedBatch {
    pub fn lambdas(&self) -> Vec<f64> {
        self.log.iter().map(|r| r.lambda).collect()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// The `k` nearest other rows of each row; ties go to the lower index.
pub fn knn_neighbors(batch: &Tensor, k: usize) -> Result<Vec<Vec<usize>>> {
    let (b, _) = batch.dims2("knn")?;
    if b <= k {
        return Err(Error::Config(format!(
            "kNN needs more than {k} rows, batch has {b}"
        )));
    }
    let mut out = Vec::with_capacity(b);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(b);
    for i in 0..b {
        cand.clear();
        let xi = batch.row(i);
        cand.extend(
            (0..b)
                .filter(|&j| j != i)
                .map(|j| (sq_dist(xi, batch.row(j)), j)),
        );
        if cand.iter().any(|(d, _)| !d.is_finite()) {
            return Err(Error::NonFinite { op: "knn" });
        }
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out.push(cand[..k].iter().map(|&(_, j)| j).collect());
    }
    Ok(out)
}

/// One draw from the symmetric `Beta(alpha, alpha)` via two Gamma variates.
pub fn sample_beta(alpha: f64, rng: &mut Rng) -> Result<f64> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|_| {
        Error::Config(format!("beta concentration must be positive, got {alpha}"))
    })?;
    loop {
        let a = gamma.sample(rng);
        let b = gamma.sample(rng);
        let s = a + b;
        // tiny alphas can underflow both draws
        if s > 0.0 && s.is_finite() {
            let v = a / s;
            if v > 0.0 && v < 1.0 {
                return Ok(v);
            }
        }
    }
}

pub fn mixup_batch(
    x: &Tensor,
    y: &[usize],
    num_classes: usize,
    config: &MixupConfig,
    rng: &mut Rng,
) -> Result<MixedBatch> {
    mix_with(x, y, num_classes, config, Partner::Nearest, rng)
}

/// Mixup with an explicit partner rule. `Partner::Random` is the baseline
/// that ignores neighborhood structure.
pub fn mix_with(
    x: &Tensor,
    y: &[usize],
    num_classes: usize,
    config: &MixupConfig,
    partner: Partner,
    rng: &mut Rng,
) -> Result<MixedBatch> {
    let (b, d) = x.dims2("mixup")?;
    if y.len() != b {
        return Err(Error::shape(
            "mixup",
            format!("{} labels for {b} rows", y.len()),
        ));
    }
    if let Some(&bad) = y.iter().find(|&&l| l >= num_classes) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: num_classes,
        });
    }
    if !config.enabled {
        let mut y_mix = Tensor::zeros(&[b, num_classes]);
        for (i, &l) in y.iter().enumerate() {
            y_mix.data_mut()[i * num_classes + l] = 1.0;
        }
        return Ok(MixedBatch {
            x_mix: x.clone(),
            y_orig: y.to_vec(),
            y_mix,
            log: Vec::new(),
        });
    }
    config.validate()?;
    let neighbors = match partner {
        Partner::Nearest => Some(knn_neighbors(x, config.k_neighbors)?),
        Partner::Random if b < 2 => {
            return Err(Error::Config("random mixup needs at least 2 rows".into()))
        }
        Partner::Random => None,
    };

    let mut x_mix = Vec::with_capacity(b * d);
    let mut log = Vec::with_capacity(b);
    for i in 0..b {
        let j = match &neighbors {
            Some(nb) => nb[i][rng::index(rng, nb[i].len())],
            None => {
                let j = rng::index(rng, b - 1);
                if j >= i {
                    j + 1
                } else {
                    j
                }
            }
        };
        let lam = sample_beta(config.alpha, rng)?;
        let lam = lam.max(1.0 - lam);
        x_mix.extend(
            x.row(i)
                .iter()
                .zip(x.row(j))
                .map(|(a, c)| lam * a + (1.0 - lam) * c),
        );
        log.push(MixRecord {
            anchor: i,
            partner: j,
            lambda: lam,
        });
    }

    let mut perm: Vec<usize> = (0..b).collect();
    rng::shuffle(rng, &mut perm);
    let mut y_mix = Tensor::zeros(&[b, num_classes]);
    for (i, rec) in log.iter().enumerate() {
        let row = &mut y_mix.data_mut()[i * num_classes..(i + 1) * num_classes];
        row[y[i]] += rec.lambda;
        row[y[perm[i]]] += 1.0 - rec.lambda;
    }

    Ok(MixedBatch {
        x_mix: Tensor::matrix(b, d, x_mix)?,
        y_orig: y.to_vec(),
        y_mix,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_knn(x: &Tensor, k: usize) -> Vec<Vec<usize>> {
        let b = x.rows();
        (0..b)
            .map(|i| {
                let mut d: Vec<(f64, usize)> = Vec::new();
                for j in 0..b {
                    if j != i {
                        let mut s = 0.0;
                        for c in 0..x.cols() {
                            s += (x.get2(i, c) - x.get2(j, c)).powi(2);
                        }
                        d.push((s.sqrt(), j));
                    }
                }
                d.sort_by(|a, b| a.partial_cmp(b).unwrap());
                d.into_iter().take(k).map(|p| p.1).collect()
            })
            .collect()
    }

    fn random_batch(seed: u64, b: usize, d: usize) -> Tensor {
        let mut r = rng::seeded(seed);
        Tensor::matrix(b, d, (0..b * d).map(|_| rng::unit(&mut r) * 4.0 - 2.0).collect()).unwrap()
    }

    #[test]
    fn knn_on_a_line() {
        let x = Tensor::matrix(3, 1, vec![0.0, 1.0, 10.0]).unwrap();
        assert_eq!(knn_neighbors(&x, 1).unwrap(), vec![vec![1], vec![0], vec![1]]);
    }

    #[test]
    fn knn_ties_prefer_lower_index() {
        let x = Tensor::from_rows(&[
            vec![0.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 1.0],
        ])
        .unwrap();
        assert_eq!(
            knn_neighbors(&x, 1).unwrap(),
            vec![vec![1], vec![0], vec![0], vec![1]]
        );
    }

    #[test]
    fn knn_matches_brute_force() {
        let x = random_batch(8, 64, 10);
        assert_eq!(knn_neighbors(&x, 5).unwrap(), brute_knn(&x, 5));
    }

    #[test]
    fn knn_needs_more_rows_than_k() {
        let x = random_batch(1, 5, 2);
        assert!(knn_neighbors(&x, 5).is_err());
    }

    fn moments(alpha: f64) -> (f64, f64) {
        let mut r = rng::seeded(77);
        let n = 100_000;
        let v: Vec<f64> = (0..n).map(|_| sample_beta(alpha, &mut r).unwrap()).collect();
        let m = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n as f64;
        (m, var)
    }

    #[test]
    fn beta_moments() {
        let (m1, v1) = moments(1.0);
        assert!((m1 - 0.5).abs() < 0.01);
        assert!((v1 - 1.0 / 12.0).abs() < 0.005);
        let (m, v) = moments(0.4);
        assert!((m - 0.5).abs() < 0.01);
        assert!((v - 1.0 / (4.0 * 1.8)).abs() < 0.005, "{v}");
        assert!(sample_beta(0.0, &mut rng::seeded(0)).is_err());
    }

    #[test]
    fn identical_rows_are_unchanged() {
        let x = Tensor::full(&[8, 3], 1.25);
        let m = mixup_batch(&x, &[0; 8], 2, &MixupConfig::default(), &mut rng::seeded(2)).unwrap();
        assert_eq!(m.x_mix, x);
    }

    #[test]
    fn disabled_is_passthrough() {
        let x = random_batch(3, 10, 4);
        let y: Vec<usize> = (0..10).map(|i| i % 2).collect();
        let cfg = MixupConfig {
            enabled: false,
            ..Default::default()
        };
        let m = mixup_batch(&x, &y, 2, &cfg, &mut rng::seeded(2)).unwrap();
        assert_eq!(m.x_mix, x);
        assert!(m.log.is_empty());
        assert_eq!(m.y_orig, y);
    }

    #[test]
    fn soft_labels_are_distributions() {
        let x = random_batch(4, 20, 3);
        let y: Vec<usize> = (0..20).map(|i| i % 3).collect();
        let m = mixup_batch(&x, &y, 3, &MixupConfig::default(), &mut rng::seeded(5)).unwrap();
        for i in 0..20 {
            let s: f64 = m.y_mix.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(m.y_mix.get2(i, y[i]) >= 0.5);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn mixed_rows_replay_from_log(seed in any::<u64>(), b in 6usize..40, d in 1usize..8) {
            let x = random_batch(seed, b, d);
            let y: Vec<usize> = (0..b).map(|i| i % 2).collect();
            let m = mixup_batch(&x, &y, 2, &MixupConfig::default(), &mut rng::seeded(seed ^ 1)).unwrap();
            let nb = brute_knn(&x, 5);
            for (i, rec) in m.log.iter().enumerate() {
                prop_assert_eq!(rec.anchor, i);
                prop_assert!(rec.lambda >= 0.5 && rec.lambda <= 1.0);
                prop_assert!(nb[i].contains(&rec.partner));
                for c in 0..d {
                    let (a, p) = (x.get2(i, c), x.get2(rec.partner, c));
                    let v = m.x_mix.get2(i, c);
                    prop_assert_eq!(v, rec.lambda * a + (1.0 - rec.lambda) * p);
                    prop_assert!(v >= a.min(p) - 1e-12 && v <= a.max(p) + 1e-12);
                }
            }
        }
    }

    #[test]
    fn neighbor_partners_stay_closer_to_the_data() {
        // two Gaussian-ish clusters; mixed points should hug the originals more
        // tightly when partners are neighbors
        let mut knn_total = 0.0;
        let mut rand_total = 0.0;
        for t in 0..100u64 {
            let mut r = rng::seeded(1000 + t);
            let mut rows = Vec::new();
            for i in 0..32 {
                let c = if i < 16 { -3.0 } else { 3.0 };
                rows.push(vec![c + rng::unit(&mut r) - 0.5, rng::unit(&mut r) - 0.5]);
            }
            let x = Tensor::from_rows(&rows).unwrap();
            let y: Vec<usize> = (0..32).map(|i| usize::from(i >= 16)).collect();
            let cfg = MixupConfig::default();
            let dist = |p: Partner| {
                let m = mix_with(&x, &y, 2, &cfg, p, &mut rng::seeded(t)).unwrap();
                (0..32)
                    .map(|i| {
                        (0..32)
                            .map(|j| sq_dist(m.x_mix.row(i), x.row(j)).sqrt())
                            .fold(f64::INFINITY, f64::min)
                    })
                    .sum::<f64>()
                    / 32.0
            };
            knn_total += dist(Partner::Nearest);
            rand_total += dist(Partner::Random);
        }
        assert!(knn_total < rand_total, "{knn_total} vs {rand_total}");
    }
}
