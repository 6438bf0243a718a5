//! Central finite-difference checks of the autodiff tape.
//!
//! Every named check draws seeded random inputs, builds the quantity on a
//! graph, and compares each analytic partial derivative with
//! `(f(x + h) - f(x - h)) / 2h`. Non-scalar outputs are reduced with a fixed
//! random weighting so every output entry contributes.
//!
//! The error for one coordinate is `|a - n| / max(|a|, |n|, FLOOR)`. Some
//! partials are exactly zero (a bias feeding a batch norm, say) while the
//! difference quotient of an O(1) loss carries about 1e-10 of rounding
//! noise, so the floor sits at 1e-5 to keep that noise under tolerance.

use crate::autodiff::{Graph, Mode, RunningStats, Var};
use crate::error::{Error, Result};
use crate::losses::{self, LossConfig};
use crate::model::{self, BoundParams, ModelConfig, ModelParams};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const FLOOR: f64 = 1e-5;
/// Minimum distance of every kinked activation input from its kink in the
/// full-model check.
pub const KINK_GAP: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: &'static str,
    pub instances: usize,
    pub coordinates: usize,
    pub max_rel_err: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

/// Compares analytic and numeric gradients of `build` at `inputs`; returns
/// the largest coordinate error and the number of coordinates checked.
pub fn check<F>(inputs: &[Tensor], build: F, h: f64) -> Result<(f64, usize)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut weights: Option<Tensor> = None;
    let mut eval = |xs: &[Tensor], want_grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs
            .iter()
            .map(|t| {
                if want_grad {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        let out = build(&mut g, &vars)?;
        let loss = if g.value(out).len() == 1 {
            out
        } else {
            let shape = g.value(out).shape().to_vec();
            let w = weights.get_or_insert_with(|| {
                let mut r = rng::seeded(0x5eed);
                let n = shape.iter().product();
                Tensor::new(shape.clone(), (0..n).map(|_| rng::unit(&mut r) + 0.5).collect())
                    .expect("shape")
            });
            let wv = g.constant(w.clone());
            let p = g.mul(out, wv)?;
            g.sum(p)?
        };
        let value = g.value(loss).item();
        let mut grads = Vec::new();
        if want_grad {
            g.backward(loss)?;
            grads = vars
                .iter()
                .map(|&v| {
                    g.grad(v)
                        .map(<[f64]>::to_vec)
                        .unwrap_or_else(|| vec![0.0; g.value(v).len()])
                })
                .collect();
        }
        Ok((value, grads))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut worst = 0.0f64;
    let mut count = 0;
    let mut xs = inputs.to_vec();
    for i in 0..xs.len() {
        for k in 0..xs[i].len() {
            let orig = xs[i].data()[k];
            xs[i].data_mut()[k] = orig + h;
            let (fp, _) = eval(&xs, false)?;
            xs[i].data_mut()[k] = orig - h;
            let (fm, _) = eval(&xs, false)?;
            xs[i].data_mut()[k] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[i][k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max(err);
            count += 1;
        }
    }
    Ok((worst, count))
}

fn uniform(r: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| lo + (hi - lo) * rng::unit(r)).collect())
        .expect("shape")
}

/// Values in `[lo, hi]` at least `gap` away from every point in `kinks`.
fn away_from(r: &mut Rng, shape: &[usize], lo: f64, hi: f64, kinks: &[f64], gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = lo + (hi - lo) * rng::unit(r);
            if kinks.iter().all(|k| (v - k).abs() > gap) {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

fn labels(r: &mut Rng, n: usize, c: usize) -> Vec<usize> {
    (0..n).map(|_| rng::index(r, c)).collect()
}

/// Mined triplets, minus those whose hinge argument sits within reach of
/// the finite-difference step. Mining is piecewise constant in the
/// embedding, so the set is fixed at the base point.
fn stable_triplets(e: &Tensor, y: &[usize], eps: f64, margin: f64) -> Vec<(usize, usize, usize)> {
    let d = |i: usize, j: usize| -> f64 {
        (0..e.cols()).map(|k| (e.get2(i, k) - e.get2(j, k)).powi(2)).sum()
    };
    losses::ms_mine_triplets(e, y, eps)
        .into_iter()
        .filter(|&(a, p, n)| (d(a, p) - d(a, n) + margin).abs() > 1e-3)
        .collect()
}

type Case = (Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>);

/// Names accepted by [`run_check`], in suite order.
pub const CHECKS: &[&str] = &[
    "cos", "sin", "sigmoid", "exp", "log", "relu", "leaky_relu", "neg", "square", "sqrt", "pow",
    "clamp", "scale", "add_scalar", "add", "sub", "mul", "div", "add_row", "mul_row", "mul_col",
    "div_col", "matmul", "transpose", "reshape", "sum", "mean", "sum_axis", "mean_axis",
    "softmax", "log_softmax", "log_softmax_masked", "pick_columns", "select_rows",
    "batchnorm_train", "batchnorm_eval", "qe", "attention", "focal", "intra", "inter", "fvl",
    "supcon", "triplet", "hybrid", "model",
];

fn bn_case(r: &mut Rng, mode: Mode) -> Case {
    let x = uniform(r, &[6, 3], -2.0, 2.0);
    let gamma = uniform(r, &[3], 0.5, 1.5);
    let beta = uniform(r, &[3], -0.5, 0.5);
    let rm = uniform(r, &[3], -0.3, 0.3).into_data();
    let rv = uniform(r, &[3], 0.5, 1.5).into_data();
    (
        vec![x, gamma, beta],
        Box::new(move |g: &mut Graph, v: &[Var]| {
            let (mut m, mut s) = (rm.clone(), rv.clone());
            g.batchnorm(
                v[0],
                v[1],
                v[2],
                RunningStats {
                    mean: &mut m,
                    var: &mut s,
                    momentum: 0.1,
                    eps: 1e-5,
                },
                mode,
            )
        }),
    )
}

fn case(name: &str, r: &mut Rng) -> Result<Case> {
    macro_rules! unary {
        ($x:expr, $f:expr) => {{
            let f = $f;
            Ok((vec![$x], Box::new(move |g: &mut Graph, v: &[Var]| f(g, v[0]))))
        }};
    }
    macro_rules! binary {
        ($a:expr, $b:expr, $f:expr) => {{
            let f = $f;
            Ok((vec![$a, $b], Box::new(move |g: &mut Graph, v: &[Var]| f(g, v[0], v[1]))))
        }};
    }
    let m34 = |r: &mut Rng| uniform(r, &[3, 4], -2.0, 2.0);
    match name {
        "cos" => unary!(m34(r), |g: &mut Graph, x| g.cos(x)),
        "sin" => unary!(m34(r), |g: &mut Graph, x| g.sin(x)),
        "sigmoid" => unary!(m34(r), |g: &mut Graph, x| g.sigmoid(x)),
        "exp" => unary!(m34(r), |g: &mut Graph, x| g.exp(x)),
        "log" => unary!(uniform(r, &[3, 4], 0.2, 3.0), |g: &mut Graph, x| g.log(x)),
        "relu" => unary!(away_from(r, &[3, 4], -2.0, 2.0, &[0.0], 1e-3), |g: &mut Graph, x| g.relu(x)),
        "leaky_relu" => unary!(
            away_from(r, &[3, 4], -2.0, 2.0, &[0.0], 1e-3),
            |g: &mut Graph, x| g.leaky_relu(x, 0.01)
        ),
        "neg" => unary!(m34(r), |g: &mut Graph, x| g.neg(x)),
        "square" => unary!(m34(r), |g: &mut Graph, x| g.square(x)),
        "sqrt" => unary!(uniform(r, &[3, 4], 0.2, 3.0), |g: &mut Graph, x| g.sqrt(x)),
        "pow" => unary!(uniform(r, &[3, 4], 0.2, 2.0), |g: &mut Graph, x| g.powf(x, 3.0)),
        "clamp" => unary!(
            away_from(r, &[3, 4], -2.0, 2.0, &[-1.0, 1.0], 1e-3),
            |g: &mut Graph, x| g.clamp(x, -1.0, 1.0)
        ),
        "scale" => unary!(m34(r), |g: &mut Graph, x| g.scale(x, -1.7)),
        "add_scalar" => unary!(m34(r), |g: &mut Graph, x| g.add_scalar(x, 0.3)),
        "add" => binary!(m34(r), m34(r), |g: &mut Graph, a, b| g.add(a, b)),
        "sub" => binary!(m34(r), m34(r), |g: &mut Graph, a, b| g.sub(a, b)),
        "mul" => binary!(m34(r), m34(r), |g: &mut Graph, a, b| g.mul(a, b)),
        "div" => binary!(m34(r), uniform(r, &[3, 4], 0.5, 2.0), |g: &mut Graph, a, b| g.div(a, b)),
        "add_row" => binary!(m34(r), uniform(r, &[4], -1.0, 1.0), |g: &mut Graph, a, b| g.add_row(a, b)),
        "mul_row" => binary!(m34(r), uniform(r, &[4], -1.0, 1.0), |g: &mut Graph, a, b| g.mul_row(a, b)),
        "mul_col" => binary!(m34(r), uniform(r, &[3], -1.0, 1.0), |g: &mut Graph, a, b| g.mul_col(a, b)),
        "div_col" => binary!(m34(r), uniform(r, &[3], 0.5, 2.0), |g: &mut Graph, a, b| g.div_col(a, b)),
        "matmul" => binary!(m34(r), uniform(r, &[4, 2], -1.0, 1.0), |g: &mut Graph, a, b| g.matmul(a, b)),
        "transpose" => unary!(m34(r), |g: &mut Graph, x| g.transpose(x)),
        "reshape" => unary!(m34(r), |g: &mut Graph, x| g.reshape(x, &[2, 6])),
        "sum" => unary!(m34(r), |g: &mut Graph, x| g.sum(x)),
        "mean" => unary!(m34(r), |g: &mut Graph, x| g.mean(x)),
        "sum_axis" => unary!(m34(r), |g: &mut Graph, x| {
            let a = g.sum_axis(x, 0)?;
            let b = g.sum_axis(x, 1)?;
            let a = g.sum(a)?;
            let b = g.square(b)?;
            let b = g.sum(b)?;
            g.add(a, b)
        }),
        "mean_axis" => unary!(m34(r), |g: &mut Graph, x| {
            let a = g.mean_axis(x, 0)?;
            let a = g.square(a)?;
            let b = g.mean_axis(x, 1)?;
            let a = g.sum(a)?;
            let b = g.sum(b)?;
            g.add(a, b)
        }),
        "softmax" => unary!(m34(r), |g: &mut Graph, x| {
            let a = g.softmax(x, 0)?;
            let b = g.softmax(x, 1)?;
            g.add(a, b)
        }),
        "log_softmax" => unary!(m34(r), |g: &mut Graph, x| g.log_softmax(x)),
        "log_softmax_masked" => {
            let mask: Vec<bool> = (0..12).map(|k| k % 4 != k / 4).collect();
            unary!(m34(r), move |g: &mut Graph, x| g.log_softmax_masked(x, Some(mask.clone())))
        }
        "pick_columns" => {
            let cols = labels(r, 3, 4);
            unary!(m34(r), move |g: &mut Graph, x| g.pick_columns(x, &cols))
        }
        "select_rows" => {
            let rows = labels(r, 5, 3);
            unary!(m34(r), move |g: &mut Graph, x| g.select_rows(x, &rows))
        }
        "batchnorm_train" => Ok(bn_case(r, Mode::Train)),
        "batchnorm_eval" => Ok(bn_case(r, Mode::Eval)),
        "qe" => binary!(
            uniform(r, &[5, 4], -2.0, 2.0),
            uniform(r, &[4], -3.14, 3.14),
            |g: &mut Graph, x, t| model::qe_forward(g, x, t)
        ),
        "attention" => {
            let d = 3;
            let mut ins = vec![uniform(r, &[4, d], -1.5, 1.5)];
            for _ in 0..4 {
                ins.push(uniform(r, &[d, d], -0.8, 0.8));
                ins.push(uniform(r, &[d], -0.3, 0.3));
            }
            let names = [
                "attn.w_q", "attn.b_q", "attn.w_k", "attn.b_k", "attn.w_v", "attn.b_v", "attn.w_o",
                "attn.b_o",
            ];
            Ok((
                ins,
                Box::new(move |g: &mut Graph, v: &[Var]| {
                    let bound = BoundParams {
                        vars: names.iter().copied().zip(v[1..].iter().copied()).collect(),
                    };
                    model::attention_forward(g, v[0], &bound)
                }),
            ))
        }
        "focal" => {
            let y = labels(r, 6, 3);
            unary!(uniform(r, &[6, 3], -2.0, 2.0), move |g: &mut Graph, x| {
                losses::focal_loss(g, x, &y, 3.0)
            })
        }
        "intra" => {
            let y = labels(r, 6, 3);
            binary!(
                uniform(r, &[6, 4], -1.0, 1.0),
                uniform(r, &[3, 4], -1.0, 1.0),
                move |g: &mut Graph, e, c| losses::intra_variance(g, e, &y, c)
            )
        }
        "inter" => unary!(uniform(r, &[4, 3], -1.0, 1.0), |g: &mut Graph, c| {
            losses::inter_separation(g, c, &[0, 1, 3])
        }),
        "fvl" => {
            let y = labels(r, 8, 3);
            let cfg = LossConfig::default();
            Ok((
                vec![
                    uniform(r, &[8, 3], -2.0, 2.0),
                    uniform(r, &[8, 4], -1.0, 1.0),
                    uniform(r, &[3, 4], -1.0, 1.0),
                ],
                Box::new(move |g: &mut Graph, v: &[Var]| {
                    Ok(losses::focal_variance_loss(g, v[0], &y, v[1], v[2], &cfg)?.total)
                }),
            ))
        }
        "supcon" => {
            let y = labels(r, 8, 3);
            unary!(uniform(r, &[8, 4], -1.0, 1.0), move |g: &mut Graph, e| {
                Ok(losses::supcon_loss(g, e, &y, 0.2)?.0)
            })
        }
        "triplet" => {
            let e = uniform(r, &[8, 4], -1.0, 1.0);
            let y = labels(r, 8, 2);
            let trip = stable_triplets(&e, &y, f64::INFINITY, 0.5);
            unary!(e, move |g: &mut Graph, ev| losses::triplet_loss(g, ev, &trip, 0.5))
        }
        "hybrid" => {
            let y = labels(r, 8, 3);
            let cfg = LossConfig::default();
            let e = uniform(r, &[8, 4], -1.0, 1.0);
            let trip = stable_triplets(&e, &y, cfg.miner_epsilon, cfg.margin);
            Ok((
                vec![uniform(r, &[8, 3], -2.0, 2.0), e, uniform(r, &[3, 4], -1.0, 1.0)],
                Box::new(move |g: &mut Graph, v: &[Var]| {
                    Ok(losses::hybrid_loss_with_triplets(g, v[0], v[1], &y, v[2], &cfg, &trip)?.loss)
                }),
            ))
        }
        "model" => {
            let cfg = ModelConfig::new(4, 3);
            let loss_cfg = LossConfig::default();
            // redraw until no activation sits within reach of a kink
            let (params, x, y, trip) = loop {
                let params = ModelParams::init(&cfg, r)?;
                let x = uniform(r, &[8, cfg.input_dim], -2.0, 2.0);
                let y = labels(r, 8, cfg.num_classes);
                let mut g = Graph::new();
                let bound = BoundParams::bind(&mut g, &params, false);
                let xv = g.constant(x.clone());
                let out = model::model_forward(&mut g, &params, &bound, xv, &cfg, Mode::Train)?;
                if g.kink_margin() > KINK_GAP {
                    let e = g.value(out.embedding).clone();
                    let trip = stable_triplets(&e, &y, loss_cfg.miner_epsilon, loss_cfg.margin);
                    break (params, x, y, trip);
                }
            };
            let learn: Vec<(&'static str, Tensor)> = params
                .entries()
                .into_iter()
                .filter(|e| e.kind.learnable())
                .map(|e| (e.name, e.tensor.clone()))
                .collect();
            let names: Vec<&'static str> = learn.iter().map(|(n, _)| *n).collect();
            let inputs = learn.into_iter().map(|(_, t)| t).collect();
            Ok((
                inputs,
                Box::new(move |g: &mut Graph, v: &[Var]| {
                    let bound = BoundParams {
                        vars: names.iter().copied().zip(v.iter().copied()).collect(),
                    };
                    let xv = g.constant(x.clone());
                    let out = model::model_forward(g, &params, &bound, xv, &cfg, Mode::Train)?;
                    let c = bound.get("centroids");
                    Ok(losses::hybrid_loss_with_triplets(g, out.logits, out.embedding, &y, c, &loss_cfg, &trip)?.loss)
                }),
            ))
        }
        other => Err(Error::Config(format!(
            "unknown gradient check `{other}`; known: {}",
            CHECKS.join(", ")
        ))),
    }
}

/// Runs `instances` seeded instances of one named check.
pub fn run_check(name: &str, instances: usize, seed: u64) -> Result<CheckReport> {
    let canonical = CHECKS
        .iter()
        .copied()
        .find(|c| *c == name)
        .ok_or_else(|| Error::Config(format!("unknown gradient check `{name}`; known: {}", CHECKS.join(", "))))?;
    let mut r = rng::seeded(seed ^ fxhash(name));
    let mut worst = 0.0f64;
    let mut coords = 0;
    for _ in 0..instances {
        let (inputs, build) = case(name, &mut r)?;
        let (e, n) = check(&inputs, build, STEP)?;
        worst = worst.max(e);
        coords += n;
    }
    Ok(CheckReport {
        name: canonical,
        instances,
        coordinates: coords,
        max_rel_err: worst,
    })
}

fn fxhash(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf29ce484222325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}

/// Every check in [`CHECKS`] whose name contains `filter` (all when `None`).
pub fn run_suite(filter: Option<&str>, instances: usize, seed: u64) -> Result<Vec<CheckReport>> {
    let names: Vec<&str> = match filter {
        Some(f) if CHECKS.contains(&f) => vec![f],
        Some(f) => CHECKS.iter().copied().filter(|c| c.contains(f)).collect(),
        None => CHECKS.to_vec(),
    };
    if names.is_empty() {
        return Err(Error::Config(format!(
            "no gradient check matches `{}`; known: {}",
            filter.unwrap_or(""),
            CHECKS.join(", ")
        )));
    }
    names.into_iter().map(|n| run_check(n, instances, seed)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // a deliberately broken derivative: d/dx of x*x built through
        // constants only has no analytic gradient
        let x = Tensor::vector(vec![1.5, -0.5]);
        let (err, n) = check(
            &[x],
            |g: &mut Graph, v: &[Var]| {
                let c = g.constant(g.value(v[0]).clone());
                let sq = g.mul(c, c)?;
                g.sum(sq)
            },
            STEP,
        )
        .unwrap();
        assert_eq!(n, 2);
        assert!(err > 0.5);
    }

    #[test]
    fn unknown_check_is_an_error() {
        assert!(run_check("nope", 1, 0).is_err());
        assert!(run_suite(Some("zzz"), 1, 0).is_err());
    }

    #[test]
    fn a_few_checks_pass() {
        for name in ["sigmoid", "matmul", "supcon", "batchnorm_train"] {
            let r = run_check(name, 3, 1).unwrap();
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn full_suite() {
        let reports = run_suite(None, 20, 7).unwrap();
        assert_eq!(reports.len(), CHECKS.len());
        for r in &reports {
            println!("{:<20} {:.3e}", r.name, r.max_rel_err);
        }
        let bad: Vec<_> = reports.iter().filter(|r| !r.passed()).collect();
        assert!(bad.is_empty(), "{bad:?}");
    }
}
