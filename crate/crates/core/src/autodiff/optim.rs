use std::collections::HashMap;
use std::f64::consts::PI;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Result, XbmError};

/// `eta0 * 0.5 * (1 + cos(pi * step / horizon))`, clamped to the final value
/// past the horizon.
pub fn cosine_lr(step: usize, horizon: usize, eta0: f64) -> f64 {
    if horizon == 0 {
        return eta0;
    }
    let s = step.min(horizon) as f64;
    eta0 * 0.5 * (1.0 + (PI * s / horizon as f64).cos())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Tensor,
    v: Tensor,
}

/// AdamW with decoupled weight decay. Moments are keyed by (position of the
/// store in the slice passed to [`AdamW::step`], parameter index), so callers
/// must pass their stores in the same order every step.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: HashMap<(usize, usize), Moments>,
}

/// Outcome of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub grad_norm: f64,
    pub clipped: bool,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update at learning rate `lr` to every non-frozen store,
    /// then zero their gradients. Gradients are rescaled first when their
    /// global norm exceeds `clip` (if given).
    pub fn step(&mut self, stores: &mut [&mut ParamStore], lr: f64, clip: Option<f64>) -> Result<StepInfo> {
        let mut sq = 0.0;
        for s in stores.iter().filter(|s| !s.is_frozen()) {
            for p in s.params() {
                if !p.grad.is_finite() {
                    return Err(XbmError::Numeric { op: "optimizer-step" });
                }
                sq += p.grad.squared_norm();
            }
        }
        let grad_norm = sq.sqrt();
        let factor = match clip {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (slot, s) in stores.iter_mut().enumerate().filter(|(_, s)| !s.is_frozen()) {
            for (pi, p) in s.params_mut().iter_mut().enumerate() {
                let mom = self.moments.entry((slot, pi)).or_insert_with(|| Moments {
                    m: Tensor::zeros(p.value.shape()),
                    v: Tensor::zeros(p.value.shape()),
                });
                let g = p.grad.data();
                let m = mom.m.data_mut();
                for (mi, gi) in m.iter_mut().zip(g) {
                    *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi * factor;
                }
                let v = mom.v.data_mut();
                for (vi, gi) in v.iter_mut().zip(g) {
                    let gs = gi * factor;
                    *vi = c.beta2 * *vi + (1.0 - c.beta2) * gs * gs;
                }
                let (m, v) = (mom.m.data(), mom.v.data());
                for ((w, mi), vi) in p.value.data_mut().iter_mut().zip(m).zip(v) {
                    let mhat = mi / bc1;
                    let vhat = vi / bc2;
                    *w -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *w);
                }
            }
            s.zero_grads();
        }
        Ok(StepInfo {
            grad_norm,
            clipped: factor < 1.0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64, grad: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add_full("w", &[1], value);
        s.params_mut()[id.index()].grad = Tensor::vector(vec![grad]);
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
        let mut s = single(1.0, 1.0);
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut [&mut s], 0.1, None).unwrap();
        let w = s.params()[0].value.data()[0];
        assert!((w - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((w - 0.9).abs() < 1e-7);
        assert_eq!(opt.steps_taken(), 1);
        assert_eq!(s.params()[0].grad.data()[0], 0.0);
    }

    #[test]
    fn zero_lr_or_zero_grad_is_identity() {
        let mut s = single(0.7, 3.0);
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut [&mut s], 0.0, None).unwrap();
        assert_eq!(s.params()[0].value.data()[0], 0.7);

        let mut s = single(0.7, 0.0);
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut [&mut s], 0.1, None).unwrap();
        assert_eq!(s.params()[0].value.data()[0], 0.7);
    }

    #[test]
    fn non_finite_grad_aborts() {
        let mut s = single(0.7, f64::NAN);
        let mut opt = AdamW::new(AdamWConfig::default());
        assert!(opt.step(&mut [&mut s], 0.1, None).is_err());
        assert_eq!(opt.steps_taken(), 0);
        assert_eq!(s.params()[0].value.data()[0], 0.7);
    }

    #[test]
    fn clipping_reports_when_active() {
        let mut s = single(0.0, 10.0);
        let mut opt = AdamW::new(AdamWConfig::default());
        let info = opt.step(&mut [&mut s], 0.1, Some(5.0)).unwrap();
        assert!(info.clipped);
        assert_eq!(info.grad_norm, 10.0);
    }

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0, 100, 0.3), 0.3);
        assert!(cosine_lr(100, 100, 0.3).abs() < 1e-17);
        assert!((cosine_lr(50, 100, 0.3) - 0.15).abs() < 1e-15);
        assert_eq!(cosine_lr(150, 100, 0.3), cosine_lr(100, 100, 0.3));
    }
}
