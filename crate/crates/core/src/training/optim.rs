//! AdamW with decoupled weight decay and the cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{MasonError, Result};

/// `lr0 * 0.5 * (1 + cos(pi * step / total))`.
pub fn cosine_lr(step: usize, total: usize, lr0: f64) -> Result<f64> {
    if total == 0 || step > total {
        return Err(MasonError::OutOfRange(format!(
            "step {step} outside [0, {total}]"
        )));
    }
    Ok(lr0 * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Applied to decoder parameters only.
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(MasonError::Validation(format!(
                    "{name} = {b} must lie in [0, 1)"
                )));
            }
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(MasonError::Validation("eps must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(MasonError::Validation("weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates for one flat parameter group.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    /// One step at 1-based iteration `t`.
    pub fn step<P>(
        &mut self,
        params: &mut [P],
        grads: &[f64],
        lr: f64,
        weight_decay: f64,
        t: u64,
        cfg: &AdamWConfig,
    ) where
        P: Copy + Into<f64> + FromF64,
    {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        let bc1 = 1.0 - cfg.beta1.powi(t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            let mut x: f64 = (*p).into();
            x *= 1.0 - lr * weight_decay;
            x -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
            *p = P::from_f64(x);
        }
    }
}

pub trait FromF64 {
    fn from_f64(v: f64) -> Self;
}

impl FromF64 for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl FromF64 for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 0.3).unwrap(), 0.3);
        assert!(cosine_lr(100, 100, 0.3).unwrap().abs() < 1e-15);
        assert!((cosine_lr(50, 100, 0.3).unwrap() - 0.15).abs() < 1e-15);
        assert!(cosine_lr(101, 100, 0.3).is_err());
        let lrs: Vec<f64> = (0..=100).map(|s| cosine_lr(s, 100, 1.0).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn first_step_moves_by_lr() {
        // bias-corrected first step is lr * sign(g) when eps is negligible
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut s = AdamState::new(2);
        let mut p = [1.0f64, -1.0];
        s.step(&mut p, &[0.5, -3.0], 0.1, 0.0, 1, &cfg);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn decoupled_decay_without_gradient() {
        let cfg = AdamWConfig::default();
        let mut s = AdamState::new(1);
        let mut p = [2.0f32];
        s.step(&mut p, &[0.0], 0.1, 0.5, 1, &cfg);
        assert!((p[0] - 1.9).abs() < 1e-6);
    }

    #[test]
    fn minimises_a_quadratic() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut s = AdamState::new(1);
        let mut p = [5.0f64];
        for t in 1..=2000 {
            let g = 2.0 * (p[0] - 1.0);
            s.step(&mut p, &[g], 0.05, 0.0, t, &cfg);
        }
        assert!((p[0] - 1.0).abs() < 1e-2);
    }
}
