use std::f64::consts::PI;

use crate::encoders::ParamSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(params: &ParamSet, config: SgdConfig) -> Self {
        let velocity = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Sgd { config, velocity }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    /// `v ← μ·v + g + wd·p`, then `p ← p − lr·v`.
    ///
    /// Non-finite gradients abort before any parameter is touched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.velocity.len() != params.len() {
            return Err(Error::shape(
                "sgd_step",
                format!("{} gradients for {} parameters", grads.len(), params.len()),
            ));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "sgd_step",
                    format!("'{}' is {:?}, gradient {:?}", name, p.shape(), g.shape()),
                ));
            }
            if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient for '{}' at element {}",
                    name, i
                )));
            }
        }
        let SgdConfig { momentum, weight_decay } = self.config;
        for ((p, g), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = momentum * *vv + gv + weight_decay * *pv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

/// `lr0·(1 + cos(π·step/total))/2`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::invalid(format!(
            "step {} outside schedule of {} steps",
            step, total_steps
        )));
    }
    Ok(lr0 * (1.0 + (PI * step as f64 / total_steps as f64).cos()) / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_set(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::scalar(v)).unwrap();
        p
    }

    fn sgd(p: &ParamSet, momentum: f64, weight_decay: f64) -> Sgd {
        Sgd::new(p, SgdConfig { momentum, weight_decay })
    }

    #[test]
    fn single_plain_step() {
        let mut p = scalar_set(0.0);
        let mut opt = sgd(&p, 0.0, 0.0);
        opt.step(&mut p, &[Tensor::scalar(2.0)], 0.1).unwrap();
        assert!((p.tensors()[0].data()[0] + 0.2).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_keeps_params_and_decays_velocity() {
        let mut p = scalar_set(1.0);
        let mut opt = sgd(&p, 0.9, 0.0);
        opt.step(&mut p, &[Tensor::scalar(1.0)], 0.1).unwrap();
        let after_first = p.tensors()[0].data()[0];
        let mut q = p.clone();
        let mut frozen = opt.clone();
        frozen.step(&mut q, &[Tensor::scalar(0.0)], 0.0).unwrap();
        assert_eq!(q, p);
        assert!((frozen.velocity()[0].data()[0] - 0.9).abs() < 1e-15);
        assert!((after_first - 0.9).abs() < 1e-15);
    }

    #[test]
    fn two_step_momentum_trace() {
        // v1 = g1 + wd·p0; p1 = p0 − lr·v1; v2 = μ·v1 + g2 + wd·p1; p2 = p1 − lr·v2.
        let (mu, wd, lr) = (0.9, 0.01, 0.5);
        let (p0, g1, g2) = (2.0, 0.3, -0.7);
        let v1 = g1 + wd * p0;
        let p1 = p0 - lr * v1;
        let v2 = mu * v1 + g2 + wd * p1;
        let p2 = p1 - lr * v2;
        let mut p = scalar_set(p0);
        let mut opt = sgd(&p, mu, wd);
        opt.step(&mut p, &[Tensor::scalar(g1)], lr).unwrap();
        opt.step(&mut p, &[Tensor::scalar(g2)], lr).unwrap();
        assert!((p.tensors()[0].data()[0] - p2).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let mut p = scalar_set(1.0);
        let mut opt = sgd(&p, 0.9, 0.0);
        let err = opt.step(&mut p, &[Tensor::scalar(f64::NAN)], 0.1).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
        assert_eq!(p.tensors()[0].data()[0], 1.0);
        assert!(opt.step(&mut p, &[], 0.1).is_err());
    }

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0, 100, 0.01).unwrap(), 0.01);
        assert!(cosine_lr(100, 100, 0.01).unwrap().abs() < 1e-18);
        assert!((cosine_lr(50, 100, 0.01).unwrap() - 0.005).abs() < 1e-15);
        assert!(cosine_lr(101, 100, 0.01).is_err());
        let mut last = f64::INFINITY;
        for s in 0..=100 {
            let lr = cosine_lr(s, 100, 1.0).unwrap();
            assert!(lr <= last);
            last = lr;
        }
    }
}
