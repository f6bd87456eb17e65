//! First-order optimizers over a [`ParamStore`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::TensorError;
use crate::graph::Gradients;
use crate::params::ParamStore;

pub trait Optimizer {
    /// Applies one update to every parameter named in `grads`.
    fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<(), TensorError>;
}

fn checked<'a>(
    params: &'a mut ParamStore,
    name: &str,
    grad: &crate::tensor::Tensor,
) -> Result<&'a mut crate::tensor::Tensor, TensorError> {
    let p = params.get_mut(name)?;
    if p.shape() != grad.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "optimizer step",
            lhs: p.shape().to_vec(),
            rhs: grad.shape().to_vec(),
        });
    }
    Ok(p)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }
}

/// SGD with heavy-ball momentum: `v ← μv + g`, `θ ← θ − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Self {
            config,
            velocity: BTreeMap::new(),
        }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<(), TensorError> {
        let SgdConfig {
            lr,
            momentum,
            weight_decay,
        } = self.config;
        for (name, g) in grads.iter() {
            let p = checked(params, name, g)?;
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.numel()]);
            for ((theta, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                let gi = gi + weight_decay * *theta;
                *vi = momentum * *vi + gi;
                *theta -= lr * *vi;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Bias-corrected Adam.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
    steps: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<(), TensorError> {
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        for (name, g) in grads.iter() {
            checked(params, name, g)?;
        }
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (name, g) in grads.iter() {
            let p = params.get_mut(name)?;
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.numel()]);
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.numel()]);
            for (((theta, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let gi = gi + weight_decay * *theta;
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                *theta -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::tensor::Tensor;

    /// Gradients of `sum(c ⊙ θ)`, i.e. the constant `c`.
    fn const_grad(params: &ParamStore, c: f64) -> Gradients {
        let mut g = Graph::new();
        let theta = g.param(params, "theta").unwrap();
        let k = g.constant_scalar(c).unwrap();
        let y = g.mul(theta, k).unwrap();
        let s = g.sum(y, None).unwrap();
        g.backward(s).unwrap()
    }

    fn theta(v: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("theta", Tensor::scalar(v).unwrap());
        p
    }

    fn value(p: &ParamStore) -> f64 {
        p.get("theta").unwrap().item().unwrap()
    }

    #[test]
    fn sgd_plain_step() {
        let mut p = theta(0.0);
        let mut opt = Sgd::new(SgdConfig {
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        });
        let g = const_grad(&p, 1.0);
        opt.step(&mut p, &g).unwrap();
        assert!((value(&p) + 0.1).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum_two_steps() {
        let mut p = theta(0.0);
        let mut opt = Sgd::new(SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        });
        for _ in 0..2 {
            let g = const_grad(&p, 1.0);
            opt.step(&mut p, &g).unwrap();
        }
        // v1 = 1, v2 = 1.9; θ = -0.1 - 0.19
        assert!((value(&p) + 0.29).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = theta(1.5);
        let g = const_grad(&p, 0.0);
        Sgd::new(SgdConfig::default()).step(&mut p, &g).unwrap();
        Adam::new(AdamConfig::default()).step(&mut p, &g).unwrap();
        assert_eq!(value(&p), 1.5);
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        for c in [-3.0, 1e-3, 250.0] {
            let mut p = theta(0.0);
            let mut opt = Adam::new(AdamConfig::default());
            let g = const_grad(&p, c);
            opt.step(&mut p, &g).unwrap();
            let delta = value(&p);
            assert_eq!(delta.signum(), -c.signum());
            assert!((delta.abs() - 0.001).abs() < 1e-6 * 0.001 + 1e-8, "c={c} delta={delta}");
        }
    }

    #[test]
    fn adam_constant_gradient_steps_do_not_grow() {
        let mut p = theta(0.0);
        let mut opt = Adam::new(AdamConfig::default());
        let g = const_grad(&p, 2.0);
        opt.step(&mut p, &g).unwrap();
        let d1 = value(&p).abs();
        let before = value(&p);
        opt.step(&mut p, &g).unwrap();
        let d2 = (value(&p) - before).abs();
        assert!(d2 <= d1 * (1.0 + 1e-6));
        assert_eq!(opt.steps(), 2);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = theta(0.0);
        let mut other = ParamStore::new();
        other.insert("theta", Tensor::row(&[1.0, 2.0]).unwrap());
        let mut g = Graph::new();
        let t = g.param(&other, "theta").unwrap();
        let s = g.sum(t, None).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(Sgd::new(SgdConfig::default()).step(&mut p, &grads).is_err());
        assert!(Adam::new(AdamConfig::default()).step(&mut p, &grads).is_err());
    }
}
