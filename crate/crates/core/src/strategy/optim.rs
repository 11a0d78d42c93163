//! Adam and learning-rate schedules.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheduler {
    Constant,
    Cosine,
}

/// `peak·½(1 + cos(π·s/S))`, flat at `peak` when `total == 0`.
pub fn cosine_lr(peak: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return peak;
    }
    let s = step.min(total) as f64;
    peak * 0.5 * (1.0 + (std::f64::consts::PI * s / total as f64).cos())
}

pub fn learning_rate(scheduler: Scheduler, peak: f64, step: usize, total: usize) -> f64 {
    match scheduler {
        Scheduler::Constant => peak,
        Scheduler::Cosine => cosine_lr(peak, step, total),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam without weight decay over a fixed set of variables.
pub struct Adam {
    vars: Vec<Var>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
    cfg: AdamConfig,
}

impl Adam {
    pub fn new(vars: Vec<Var>, cfg: AdamConfig) -> Result<Self> {
        let m = vars.iter().map(|v| v.zeros_like()).collect::<candle_core::Result<Vec<_>>>()?;
        let v = vars.iter().map(|v| v.zeros_like()).collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self { vars, m, v, t: 0, cfg })
    }

    pub fn steps(&self) -> usize {
        self.t as usize
    }

    /// Applies one update with learning rate `lr`. Variables without a
    /// gradient keep their moments and values.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (i, var) in self.vars.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            // leaf gradients can still carry the backward graph
            let g = g.detach();
            let m = ((&self.m[i] * beta1)? + (&g * (1.0 - beta1))?)?.detach();
            let v = ((&self.v[i] * beta2)? + (g.sqr()? * (1.0 - beta2))?)?.detach();
            if lr != 0.0 {
                let update = ((&m / c1)? / ((&v / c2)?.sqrt()? + eps)?)?;
                var.set(&(var.as_tensor().detach() - (update * lr)?)?)?;
            }
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn cosine_closed_form() {
        let peak = 1e-3;
        let total = 600;
        assert!((cosine_lr(peak, 0, total) - peak).abs() < 1e-15);
        assert!((cosine_lr(peak, 300, total) - 0.5 * peak).abs() < 1e-15);
        assert!(cosine_lr(peak, total, total) <= 1e-3 * peak);
        let mut prev = f64::INFINITY;
        for s in 0..=total {
            let lr = cosine_lr(peak, s, total);
            let want = peak * 0.5 * (1.0 + (std::f64::consts::PI * s as f64 / total as f64).cos());
            assert!((lr - want).abs() < 1e-9);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // with bias correction the first update is lr·g/(|g|+eps)
        let w = Var::from_tensor(&Tensor::new(&[1.0f64, -2.0], &Device::Cpu).unwrap()).unwrap();
        let loss = (w.as_tensor() * 3.0).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let mut opt = Adam::new(vec![w.clone()], AdamConfig::default()).unwrap();
        opt.step(&grads, 0.1).unwrap();
        let got = w.as_tensor().to_vec1::<f64>().unwrap();
        assert!((got[0] - 0.9).abs() < 1e-6);
        assert!((got[1] + 2.1).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_leaves_parameters_bitwise() {
        let w = Var::ones((3,), DType::F32, &Device::Cpu).unwrap();
        let loss = w.as_tensor().sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let mut opt = Adam::new(vec![w.clone()], AdamConfig::default()).unwrap();
        opt.step(&grads, 0.0).unwrap();
        assert_eq!(w.as_tensor().to_vec1::<f32>().unwrap(), vec![1.0; 3]);
    }

    #[test]
    fn moments_do_not_retain_the_graph() {
        let w = Var::from_tensor(&Tensor::new(&[[1.0f64, 2.0], [3.0, 4.0]], &Device::Cpu).unwrap()).unwrap();
        let u = Var::from_tensor(&Tensor::new(&[[0.5f64], [-1.0]], &Device::Cpu).unwrap()).unwrap();
        let mut opt = Adam::new(vec![w.clone(), u.clone()], AdamConfig::default()).unwrap();
        for _ in 0..3 {
            let loss = w.as_tensor().matmul(u.as_tensor()).unwrap().sqr().unwrap().sum_all().unwrap();
            opt.step(&loss.backward().unwrap(), 1e-2).unwrap();
        }
        assert!(opt.m.iter().chain(&opt.v).all(|t| !t.track_op()));
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let w = Var::from_tensor(&Tensor::new(&[5.0f64, -3.0], &Device::Cpu).unwrap()).unwrap();
        let mut opt = Adam::new(vec![w.clone()], AdamConfig::default()).unwrap();
        for _ in 0..2000 {
            let loss = w.as_tensor().sqr().unwrap().sum_all().unwrap();
            opt.step(&loss.backward().unwrap(), 0.05).unwrap();
        }
        for v in w.as_tensor().to_vec1::<f64>().unwrap() {
            assert!(v.abs() < 1e-2);
        }
        assert_eq!(opt.steps(), 2000);
    }
}
