//! Parameter updates: AdamW with decoupled weight decay, and plain SGD.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    AdamW,
    Sgd,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::AdamW => "adamw",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adamw" => Ok(OptimizerKind::AdamW),
            "sgd" => Ok(OptimizerKind::Sgd),
            _ => Err(Error::invalid(format!("unknown optimizer {s:?} (expected adamw or sgd)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { kind: OptimizerKind::AdamW, lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, grad_clip: 1.0 }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.grad_clip >= 0.0;
        if !ok {
            return Err(Error::invalid(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// Optimizer state for a fixed list of parameter tensors.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub config: OptimConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: u64,
}

impl Optimizer {
    pub fn new<F: Float>(config: OptimConfig, params: &[Tensor<F>]) -> Result<Self> {
        config.validate()?;
        let zeros = || params.iter().map(|p| vec![0.0; p.len()]).collect();
        let (m, v) = match config.kind {
            OptimizerKind::AdamW => (zeros(), zeros()),
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
        };
        Ok(Self { config, m, v, steps: 0 })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update in place and returns the gradient norm before
    /// clipping. Non-finite gradients are rejected before anything changes.
    pub fn step<F: Float>(&mut self, params: &mut [Tensor<F>], grads: &[Tensor<F>]) -> Result<f64> {
        if params.len() != grads.len() {
            return Err(Error::invalid(format!("{} parameters but {} gradients", params.len(), grads.len())));
        }
        let mut sq = 0.0;
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::Shape { op: "optimizer_step", detail: format!("{:?} vs {:?}", p.shape(), g.shape()) });
            }
            sq += g.data().iter().map(|v| v.f64() * v.f64()).sum::<f64>();
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        let c = &self.config;
        let clip = if c.grad_clip > 0.0 && norm > c.grad_clip { c.grad_clip / norm } else { 1.0 };
        self.steps += 1;
        match c.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w = F::of(w.f64() - c.lr * clip * d.f64());
                    }
                }
            }
            OptimizerKind::AdamW => {
                let t = self.steps as i32;
                let bc1 = 1.0 - c.beta1.powi(t);
                let bc2 = 1.0 - c.beta2.powi(t);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for (j, (w, &d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        let d = d.f64() * clip;
                        m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * d;
                        v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * d * d;
                        let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
                        let x = w.f64();
                        *w = F::of(x - c.lr * (update + c.weight_decay * x));
                    }
                }
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adamw_step_moves_by_lr_times_sign() {
        // With bias correction the first update is g / |g| per coordinate.
        let cfg = OptimConfig { weight_decay: 0.0, grad_clip: 0.0, ..OptimConfig::default() };
        let mut p = vec![Tensor::from_vec(&[3], vec![1.0f64, -2.0, 0.5]).unwrap()];
        let g = vec![Tensor::from_vec(&[3], vec![0.3, -4.0, 1e-3]).unwrap()];
        let mut opt = Optimizer::new(cfg, &p).unwrap();
        opt.step(&mut p, &g).unwrap();
        let want = [1.0 - 1e-3, -2.0 + 1e-3, 0.5 - 1e-3];
        for (a, b) in p[0].data().iter().zip(want) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let cfg = OptimConfig { weight_decay: 0.1, grad_clip: 0.0, ..OptimConfig::default() };
        let mut p = vec![Tensor::from_vec(&[1], vec![2.0f64]).unwrap()];
        let g = vec![Tensor::from_vec(&[1], vec![0.0]).unwrap()];
        let mut opt = Optimizer::new(cfg, &p).unwrap();
        opt.step(&mut p, &g).unwrap();
        assert!((p[0].item() - (2.0 - 1e-3 * 0.1 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn clipping_scales_sgd_update() {
        let cfg = OptimConfig { kind: OptimizerKind::Sgd, lr: 1.0, grad_clip: 1.0, ..OptimConfig::default() };
        let mut p = vec![Tensor::from_vec(&[2], vec![0.0f64, 0.0]).unwrap()];
        let g = vec![Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap()];
        let mut opt = Optimizer::new(cfg, &p).unwrap();
        assert_eq!(opt.step(&mut p, &g).unwrap(), 5.0);
        assert!((p[0].data()[0] + 0.6).abs() < 1e-15 && (p[0].data()[1] + 0.8).abs() < 1e-15);
        let before = p[0].clone();
        let bad = vec![Tensor::from_vec(&[2], vec![f64::NAN, 0.0]).unwrap()];
        assert!(matches!(opt.step(&mut p, &bad), Err(Error::Numeric(_))));
        assert!(p[0].bit_eq(&before));
    }
}
