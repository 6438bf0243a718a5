//! AdamW with decoupled weight decay and the one-cycle learning-rate policy.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::model::ModelParams;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// Moment buffers for every learnable array of a [`ModelParams`], in entry
/// order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &ModelParams, config: AdamWConfig) -> Self {
        let sizes: Vec<usize> = params
            .entries()
            .iter()
            .filter(|e| e.kind.learnable())
            .map(|e| e.tensor.len())
            .collect();
        AdamW {
            config,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update. `grads` holds one buffer per learnable array, in entry
    /// order. Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        let mut entries: Vec<_> = params
            .entries_mut()
            .into_iter()
            .filter(|e| e.kind.learnable())
            .collect();
        if grads.len() != entries.len() {
            return Err(Error::shape(
                "adamw",
                format!("{} gradients for {} parameters", grads.len(), entries.len()),
            ));
        }
        for (e, g) in entries.iter().zip(grads) {
            if g.len() != e.tensor.len() {
                return Err(Error::shape("adamw", format!("gradient size for `{}`", e.name)));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(e.name.to_string()));
            }
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, e) in entries.iter_mut().enumerate() {
            let decay = if e.kind.decays() { lr * c.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, p) in e.tensor.data_mut().iter_mut().enumerate() {
                let g = grads[i][k];
                *p -= decay * *p;
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g * g;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                *p -= lr * mh / (vh.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OneCycle {
    pub max_lr: f64,
    /// Fraction of steps spent warming up.
    pub pct_start: f64,
    /// Start rate is `max_lr / div_factor`.
    pub div_factor: f64,
    /// End rate is `max_lr / final_div_factor`.
    pub final_div_factor: f64,
}

impl Default for OneCycle {
    fn default() -> Self {
        OneCycle {
            max_lr: 1e-2,
            pct_start: 0.3,
            div_factor: 25.0,
            final_div_factor: 1e4,
        }
    }
}

fn cos_interp(start: f64, end: f64, pct: f64) -> f64 {
    end + (start - end) / 2.0 * (1.0 + (PI * pct).cos())
}

impl OneCycle {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_lr > 0.0) || !(self.div_factor > 0.0) || !(self.final_div_factor > 0.0) {
            return Err(Error::Config("one-cycle rates and divisors must be positive".into()));
        }
        if !(self.pct_start > 0.0 && self.pct_start < 1.0) {
            return Err(Error::Config("one-cycle warm-up fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Cosine warm-up from `max_lr / div_factor` to `max_lr` until step
    /// `pct_start * total`, then cosine decay reaching
    /// `max_lr / final_div_factor` at the last step.
    pub fn lr(&self, step: usize, total: usize) -> Result<f64> {
        if step >= total {
            return Err(Error::Config(format!(
                "schedule step {step} outside 0..{total}"
            )));
        }
        let start = self.max_lr / self.div_factor;
        let end = self.max_lr / self.final_div_factor;
        let peak = self.pct_start * total as f64;
        let last = (total - 1) as f64;
        let s = step as f64;
        Ok(if s <= peak {
            cos_interp(start, self.max_lr, s / peak)
        } else if last <= peak {
            self.max_lr
        } else {
            cos_interp(self.max_lr, end, (s - peak) / (last - peak))
        })
    }
}

pub fn one_cycle_lr(step: usize, total: usize, max_lr: f64) -> Result<f64> {
    OneCycle {
        max_lr,
        ..Default::default()
    }
    .lr(step, total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use approx::assert_abs_diff_eq;

    fn params() -> ModelParams {
        ModelParams::init_seeded(&ModelConfig::new(3, 2), 5).unwrap()
    }

    fn zero_grads(p: &ModelParams) -> Vec<Vec<f64>> {
        p.entries()
            .iter()
            .filter(|e| e.kind.learnable())
            .map(|e| vec![0.0; e.tensor.len()])
            .collect()
    }

    #[test]
    fn zero_grads_without_decay_change_nothing() {
        let mut p = params();
        let before = p.clone();
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(&p, cfg);
        let g = zero_grads(&p);
        opt.step(&mut p, &g, 0.1).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn decay_only_scales_decayed_kinds() {
        let mut p = params();
        let before = p.clone();
        let cfg = AdamWConfig {
            weight_decay: 0.1,
            ..Default::default()
        };
        let mut opt = AdamW::new(&p, cfg);
        let g = zero_grads(&p);
        opt.step(&mut p, &g, 1.0).unwrap();
        for (a, b) in p.entries().iter().zip(before.entries()) {
            for (x, y) in a.tensor.data().iter().zip(b.tensor.data()) {
                if a.kind.decays() {
                    assert_abs_diff_eq!(*x, 0.9 * y, epsilon = 1e-15);
                } else {
                    assert_eq!(x, y, "{}", a.name);
                }
            }
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = params();
        let w0 = p.fc3.bias.data()[0];
        let mut opt = AdamW::new(
            &p,
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
        );
        let mut g = zero_grads(&p);
        // gradient of w^2 at w0 for fc3.bias[0]
        let idx = p
            .entries()
            .iter()
            .filter(|e| e.kind.learnable())
            .position(|e| e.name == "fc3.bias")
            .unwrap();
        g[idx][0] = 2.0 * w0;
        opt.step(&mut p, &g, 0.1).unwrap();
        let moved = w0 - p.fc3.bias.data()[0];
        assert_abs_diff_eq!(moved, 0.1 * w0.signum(), epsilon = 1e-6);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = params();
        let before = p.clone();
        let mut opt = AdamW::new(&p, AdamWConfig::default());
        let mut g = zero_grads(&p);
        g[1][0] = f64::NAN;
        let err = opt.step(&mut p, &g, 0.1).unwrap_err();
        assert!(err.to_string().contains("theta2"), "{err}");
        assert_eq!(p, before);
    }

    #[test]
    fn schedule_endpoints() {
        let total = 1000;
        assert_abs_diff_eq!(one_cycle_lr(0, total, 1e-2).unwrap(), 4e-4, epsilon = 1e-18);
        assert_abs_diff_eq!(one_cycle_lr(300, total, 1e-2).unwrap(), 1e-2, epsilon = 1e-18);
        assert_abs_diff_eq!(one_cycle_lr(999, total, 1e-2).unwrap(), 1e-6, epsilon = 1e-18);
        assert!(one_cycle_lr(1000, total, 1e-2).is_err());
        let lrs: Vec<f64> = (0..total).map(|s| one_cycle_lr(s, total, 1e-2).unwrap()).collect();
        assert!(lrs[..=300].windows(2).all(|w| w[1] >= w[0]));
        assert!(lrs[300..].windows(2).all(|w| w[1] <= w[0]));
        assert!(lrs.windows(2).all(|w| (w[1] - w[0]).abs() < 1e-4));
    }
}
