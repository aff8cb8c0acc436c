//! AdamW with decoupled weight decay and a stepped exponential schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
            weight_decay: 1e-4,
        }
    }
}

/// `lr(epoch) = initial · factor^⌊epoch / every⌋`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    pub factor: f64,
    pub every: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial: 1e-4,
            factor: 0.95,
            every: 50,
        }
    }
}

impl LrSchedule {
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let k = epoch / self.every.max(1);
        (0..k).fold(self.initial, |lr, _| lr * self.factor)
    }
}

/// Optimizer moments for one parameter store.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update with learning rate `lr` and zeroes the gradients.
    pub fn step(&mut self, params: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if !params.grads_populated() {
            return Err(Error::EmptyGradients);
        }
        if params.len() != self.m.len() {
            return Err(Error::Invalid("optimizer state does not match parameters".into()));
        }
        self.t += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.config;
        let t = i32::try_from(self.t).unwrap_or(i32::MAX);
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let decay = 1.0 - lr * weight_decay;
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            for (((w, g), mi), vi) in p.value.iter_mut().zip(&p.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g.f64();
                let mn = beta1 * mi.f64() + (1.0 - beta1) * g;
                let vn = beta2 * vi.f64() + (1.0 - beta2) * g * g;
                *mi = T::of(mn);
                *vi = T::of(vn);
                let mhat = mn / c1;
                let vhat = vn / c2;
                *w = T::of(w.f64() * decay - lr * (mhat / (vhat.sqrt() + eps)));
            }
        }
        params.zero_grad();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_points() {
        let s = LrSchedule::default();
        assert_eq!(s.lr_at_epoch(0), 1e-4);
        assert_eq!(s.lr_at_epoch(49), 1e-4);
        assert_eq!(s.lr_at_epoch(50), 9.5e-5);
        assert_eq!(s.lr_at_epoch(125), 9.025e-5);
    }

    #[test]
    fn step_without_gradients_fails() {
        let mut p = ParamStore::<f64>::new();
        p.add("w", vec![1], vec![1.0]);
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        assert!(matches!(opt.step(&mut p, 1e-4), Err(Error::EmptyGradients)));
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = ParamStore::<f64>::new();
        let id = p.add("w", vec![1], vec![1.0]);
        p.get_mut(id).grad[0] = 0.1;
        p.mark_grads_populated();
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg, &p);
        opt.step(&mut p, 1e-4).unwrap();
        let want = 1.0 - 1e-4 * (0.1 / (0.1 + 1e-7));
        assert!((p.value(id)[0] - want).abs() < 1e-15);
        assert_eq!(p.get(id).grad[0], 0.0);
        assert!(!p.grads_populated());
    }
}
