//! Optimizers and the learning-rate schedule.

use std::collections::BTreeMap;

use crate::params::ParamStore;
use crate::tensor::Matrix;

/// Cosine decay from `base` at epoch 0 to 0 at the last epoch.
pub fn cosine_lr(base: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs <= 1 {
        return base;
    }
    let progress = epoch.min(epochs - 1) as f64 / (epochs - 1) as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

pub trait Optimizer {
    /// Applies one update. `lr` gives the step size for each parameter name.
    fn step(&mut self, store: &mut ParamStore, grads: &[(String, Matrix)], lr: &dyn Fn(&str) -> f64);
}

/// Gradient descent with heavy-ball momentum and L2 weight decay folded into
/// the gradient.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Matrix>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, store: &mut ParamStore, grads: &[(String, Matrix)], lr: &dyn Fn(&str) -> f64) {
        for (name, g) in grads {
            let p = store.get_mut(name).expect("gradient for unknown parameter");
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let rate = lr(name);
            for ((pi, vi), gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *pi;
                *pi -= rate * *vi;
            }
        }
    }
}

/// Adam with decoupled weight decay. Parameters matched by `no_decay` skip
/// the decay term.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    no_decay: fn(&str) -> bool,
    m: BTreeMap<String, Matrix>,
    v: BTreeMap<String, Matrix>,
    t: BTreeMap<String, i32>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64, no_decay: fn(&str) -> bool) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            no_decay,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: BTreeMap::new(),
        }
    }
}

impl Optimizer for AdamW {
    fn step(&mut self, store: &mut ParamStore, grads: &[(String, Matrix)], lr: &dyn Fn(&str) -> f64) {
        for (name, g) in grads {
            let p = store.get_mut(name).expect("gradient for unknown parameter");
            let zeros = || Matrix::zeros(g.rows(), g.cols());
            let m = self.m.entry(name.clone()).or_insert_with(zeros);
            let v = self.v.entry(name.clone()).or_insert_with(zeros);
            let t = self.t.entry(name.clone()).or_insert(0);
            *t += 1;
            let c1 = 1.0 - self.beta1.powi(*t);
            let c2 = 1.0 - self.beta2.powi(*t);
            let rate = lr(name);
            let decay = if (self.no_decay)(name) { 0.0 } else { self.weight_decay };
            for (((pi, mi), vi), gi) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *pi -= rate * decay * *pi;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *pi -= rate * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints_and_monotonicity() {
        let e = 250;
        assert_eq!(cosine_lr(0.01, 0, e), 0.01);
        assert!(cosine_lr(0.01, e - 1, e) <= 1e-3 * 0.01);
        let mut prev = f64::INFINITY;
        for i in 0..e {
            let lr = cosine_lr(0.01, i, e);
            assert!(lr <= prev);
            prev = lr;
        }
        assert_eq!(cosine_lr(0.5, 0, 1), 0.5);
    }

    fn store(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Matrix::scalar(x));
        s
    }

    #[test]
    fn sgd_momentum_hand_steps() {
        let mut s = store(1.0);
        let mut opt = Sgd::new(0.9, 0.0);
        let g = vec![("w".to_string(), Matrix::scalar(2.0))];
        opt.step(&mut s, &g, &|_| 0.1);
        assert!((s.expect("w").get(0, 0) - 0.8).abs() < 1e-15);
        opt.step(&mut s, &g, &|_| 0.1);
        // v = 0.9·2 + 2 = 3.8
        assert!((s.expect("w").get(0, 0) - 0.42).abs() < 1e-15);
    }

    #[test]
    fn adamw_first_step_has_unit_magnitude() {
        let mut s = store(1.0);
        let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.0, |_| false);
        opt.step(&mut s, &[("w".to_string(), Matrix::scalar(-3.0))], &|_| 0.01);
        assert!((s.expect("w").get(0, 0) - 1.01).abs() < 1e-9);
    }

    #[test]
    fn adamw_decay_is_decoupled_and_skippable() {
        let zero = vec![("w".to_string(), Matrix::scalar(0.0))];
        let mut s = store(2.0);
        AdamW::new(0.9, 0.999, 1e-8, 0.5, |_| false).step(&mut s, &zero, &|_| 0.1);
        assert!((s.expect("w").get(0, 0) - 1.9).abs() < 1e-15);
        let mut s = store(2.0);
        AdamW::new(0.9, 0.999, 1e-8, 0.5, |n| n == "w").step(&mut s, &zero, &|_| 0.1);
        assert_eq!(s.expect("w").get(0, 0), 2.0);
    }

    #[test]
    fn zero_rate_leaves_parameters() {
        let g = vec![("w".to_string(), Matrix::scalar(5.0))];
        let mut s = store(0.3);
        Sgd::new(0.9, 1e-4).step(&mut s, &g, &|_| 0.0);
        AdamW::new(0.9, 0.999, 1e-8, 1e-2, |_| false).step(&mut s, &g, &|_| 0.0);
        assert_eq!(s.expect("w").get(0, 0), 0.3);
    }
}
