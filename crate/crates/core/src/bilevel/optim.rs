//! First-order optimizers over a [`ParamSet`] (no graph is kept).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSet, Tensor};
use crate::error::Result;

/// Update rule for the meta and prior networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetaOptimizer {
    Sgd,
    #[default]
    Adam,
}

/// SGD with heavy-ball momentum and L2 weight decay.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &ParamSet, grads: &[Tensor], lr: f64) -> Result<ParamSet> {
        params.zip_map(grads, |name, p, g| {
            let vel = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; p.numel()]);
            let data = p
                .data()
                .iter()
                .zip(g.data())
                .zip(vel.iter_mut())
                .map(|((&w, &dw), v)| {
                    let d = dw + self.weight_decay * w;
                    *v = self.momentum * *v + d;
                    w - lr * *v
                })
                .collect();
            Tensor::new(p.shape(), data)
        })
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

impl Adam {
    pub fn step(&mut self, params: &ParamSet, grads: &[Tensor], lr: f64) -> Result<ParamSet> {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        params.zip_map(grads, |name, p, g| {
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; p.numel()], vec![0.0; p.numel()]));
            let mut data = Vec::with_capacity(p.numel());
            for i in 0..p.numel() {
                let dw = g.data()[i];
                m[i] = b1 * m[i] + (1.0 - b1) * dw;
                v[i] = b2 * v[i] + (1.0 - b2) * dw * dw;
                data.push(p.data()[i] - lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps));
            }
            Tensor::new(p.shape(), data)
        })
    }
}

/// Either meta optimizer behind one interface.
#[derive(Debug, Clone)]
pub enum MetaUpdater {
    Sgd(Sgd),
    Adam(Adam),
}

impl MetaUpdater {
    pub fn new(kind: MetaOptimizer) -> Self {
        match kind {
            MetaOptimizer::Sgd => MetaUpdater::Sgd(Sgd::new(0.0, 0.0)),
            MetaOptimizer::Adam => MetaUpdater::Adam(Adam::default()),
        }
    }

    pub fn step(&mut self, params: &ParamSet, grads: &[Tensor], lr: f64) -> Result<ParamSet> {
        match self {
            MetaUpdater::Sgd(s) => s.step(params, grads, lr),
            MetaUpdater::Adam(a) => a.step(params, grads, lr),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::vector(vec![v]));
        p
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut opt = Sgd::new(0.9, 0.0);
        let g = [Tensor::vector(vec![1.0])];
        let p1 = opt.step(&single(0.0), &g, 0.1).unwrap();
        let p2 = opt.step(&p1, &g, 0.1).unwrap();
        assert!((p1.get("w").unwrap().item() + 0.1).abs() < 1e-15);
        assert!((p2.get("w").unwrap().item() + 0.1 + 0.19).abs() < 1e-15);
    }

    #[test]
    fn sgd_weight_decay_and_zero_lr() {
        let mut opt = Sgd::new(0.0, 0.5);
        let p = opt.step(&single(2.0), &[Tensor::vector(vec![0.0])], 0.1).unwrap();
        assert!((p.get("w").unwrap().item() - 1.9).abs() < 1e-15);
        let same = Sgd::new(0.9, 5e-4).step(&single(2.0), &[Tensor::vector(vec![3.0])], 0.0).unwrap();
        assert_eq!(same.get("w").unwrap().item(), 2.0);
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let mut opt = Adam::default();
        let p = opt.step(&single(1.0), &[Tensor::vector(vec![-4.0])], 0.01).unwrap();
        assert!((p.get("w").unwrap().item() - 1.01).abs() < 1e-9);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut opt = Adam::default();
        let mut p = single(3.0);
        for _ in 0..3000 {
            let w = p.get("w").unwrap().item();
            p = opt.step(&p, &[Tensor::vector(vec![2.0 * (w - 1.0)])], 0.01).unwrap();
        }
        assert!((p.get("w").unwrap().item() - 1.0).abs() < 1e-3);
    }
}
