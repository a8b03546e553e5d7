use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::RealMatrix;
use crate::error::{contract, Result};

#[derive(Debug, Clone, PartialEq)]
struct Slot {
    value: RealMatrix,
    grad: Option<RealMatrix>,
    velocity: RealMatrix,
}

/// Named trainable parameters with their gradients and momentum buffers.
///
/// Iteration order is the lexicographic order of names, which fixes the
/// order of every reduction over parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    slots: BTreeMap<String, Slot>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: RealMatrix) -> Result<()> {
        let name = name.into();
        if self.slots.contains_key(&name) {
            return Err(contract(format!("duplicate parameter name {name:?}")));
        }
        let (r, c) = value.shape();
        self.slots.insert(
            name,
            Slot {
                value,
                grad: None,
                velocity: RealMatrix::zeros(r, c),
            },
        );
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.slots.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn get(&self, name: &str) -> Result<&RealMatrix> {
        self.slots
            .get(name)
            .map(|s| &s.value)
            .ok_or_else(|| contract(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut RealMatrix> {
        self.slots
            .get_mut(name)
            .map(|s| &mut s.value)
            .ok_or_else(|| contract(format!("unknown parameter {name:?}")))
    }

    /// Gradient buffer, if any backward pass has written to it since the last step.
    pub fn grad(&self, name: &str) -> Option<&RealMatrix> {
        self.slots.get(name).and_then(|s| s.grad.as_ref())
    }

    /// Gradient buffer, created zero-filled on first access.
    pub fn grad_mut(&mut self, name: &str) -> Result<&mut RealMatrix> {
        let slot = self
            .slots
            .get_mut(name)
            .ok_or_else(|| contract(format!("unknown parameter {name:?}")))?;
        let (r, c) = slot.value.shape();
        Ok(slot.grad.get_or_insert_with(|| RealMatrix::zeros(r, c)))
    }

    pub fn velocity(&self, name: &str) -> Option<&RealMatrix> {
        self.slots.get(name).map(|s| &s.velocity)
    }

    pub fn velocity_mut(&mut self, name: &str) -> Result<&mut RealMatrix> {
        self.slots
            .get_mut(name)
            .map(|s| &mut s.velocity)
            .ok_or_else(|| contract(format!("unknown parameter {name:?}")))
    }

    pub fn zero_grads(&mut self) {
        for slot in self.slots.values_mut() {
            slot.grad = None;
        }
    }

    /// Parameter values only, in name order.
    pub fn values(&self) -> impl Iterator<Item = (&str, &RealMatrix)> {
        self.slots.iter().map(|(k, s)| (k.as_str(), &s.value))
    }
}

/// Nesterov-momentum SGD with polynomial learning-rate decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub beta: f64,
    pub total_iters: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            alpha: 10.0,
            beta: 0.75,
            total_iters: 1,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(contract("lr0 must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(contract("momentum must lie in [0, 1)"));
        }
        if self.weight_decay < 0.0 || self.alpha < 0.0 || self.beta < 0.0 {
            return Err(contract("weight_decay, alpha and beta must be nonnegative"));
        }
        if self.total_iters == 0 {
            return Err(contract("total_iters must be at least 1"));
        }
        Ok(())
    }
}

/// `lr0 · (1 + alpha·i/total_iters)^(−beta)`
pub fn lr_at(cfg: &SgdConfig, i: usize) -> f64 {
    let progress = i as f64 / cfg.total_iters.max(1) as f64;
    cfg.lr0 * (1.0 + cfg.alpha * progress).powf(-cfg.beta)
}

/// One Nesterov step over every parameter, then clears the gradients.
///
/// With `g' = g + wd·p`: `v ← μv − lr·g'`, `p ← p + μv − lr·g'`.
pub fn sgd_step(store: &mut ParamStore, cfg: &SgdConfig, i: usize) -> Result<()> {
    if let Some((name, _)) = store.slots.iter().find(|(_, s)| s.grad.is_none()) {
        return Err(contract(format!("no gradient for parameter {name:?}")));
    }
    let lr = lr_at(cfg, i);
    let mu = cfg.momentum;
    let wd = cfg.weight_decay;
    for slot in store.slots.values_mut() {
        let grad = slot.grad.take().expect("checked above");
        let p = slot.value.as_mut_slice();
        let v = slot.velocity.as_mut_slice();
        for ((pk, vk), &gk) in p.iter_mut().zip(v.iter_mut()).zip(grad.as_slice()) {
            let g = gk + wd * *pk;
            *vk = mu * *vk - lr * g;
            *pk += mu * *vk - lr * g;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(p: f64, g: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", RealMatrix::from_vec(1, 1, vec![p]).unwrap())
            .unwrap();
        s.grad_mut("p").unwrap().set(0, 0, g);
        s
    }

    fn cfg(lr0: f64, momentum: f64, wd: f64) -> SgdConfig {
        SgdConfig {
            lr0,
            momentum,
            weight_decay: wd,
            alpha: 0.0,
            beta: 0.75,
            total_iters: 10,
        }
    }

    #[test]
    fn lr_schedule_examples() {
        let c = SgdConfig {
            lr0: 0.5,
            total_iters: 100,
            ..SgdConfig::default()
        };
        assert_eq!(lr_at(&c, 0), 0.5);
        let end = lr_at(&c, 100) / 0.5;
        assert!((end - 0.165_560_026_076_170_2).abs() < 1e-9, "{end}");
        let flat = SgdConfig { alpha: 0.0, ..c };
        assert_eq!(lr_at(&flat, 37), 0.5);
    }

    #[test]
    fn lr_schedule_nonincreasing() {
        let c = SgdConfig {
            total_iters: 500,
            ..SgdConfig::default()
        };
        for i in 0..500 {
            assert!(lr_at(&c, i + 1) <= lr_at(&c, i));
        }
    }

    #[test]
    fn zero_signal_leaves_parameter() {
        let mut s = scalar_store(0.3, 0.0);
        sgd_step(&mut s, &cfg(0.1, 0.9, 0.0), 0).unwrap();
        assert_eq!(s.get("p").unwrap().get(0, 0), 0.3);
        assert!(s.grad("p").is_none());
    }

    #[test]
    fn nesterov_one_step() {
        let mut s = scalar_store(0.0, 1.0);
        sgd_step(&mut s, &cfg(0.1, 0.9, 0.0), 0).unwrap();
        assert!((s.velocity("p").unwrap().get(0, 0) + 0.1).abs() < 1e-15);
        assert!((s.get("p").unwrap().get(0, 0) + 0.19).abs() < 1e-15);
    }

    #[test]
    fn decay_only_step() {
        let (lr, wd, mu) = (0.1, 5e-4, 0.9);
        let mut s = scalar_store(1.0, 0.0);
        sgd_step(&mut s, &cfg(lr, mu, wd), 0).unwrap();
        let p = s.get("p").unwrap().get(0, 0);
        assert!((1.0 - p - lr * wd * (1.0 + mu)).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_is_a_contract_violation() {
        let mut s = ParamStore::new();
        s.insert("a", RealMatrix::zeros(2, 2)).unwrap();
        assert!(matches!(
            sgd_step(&mut s, &SgdConfig::default(), 0),
            Err(crate::Error::Contract(_))
        ));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.insert("a", RealMatrix::zeros(1, 1)).unwrap();
        assert!(s.insert("a", RealMatrix::zeros(1, 1)).is_err());
    }

    #[test]
    fn plain_sgd_descends_convex_quadratic() {
        // f(x, y) = 3x² + 0.5y²
        let f = |p: &[f64]| 3.0 * p[0] * p[0] + 0.5 * p[1] * p[1];
        let mut s = ParamStore::new();
        s.insert("p", RealMatrix::from_vec(1, 2, vec![1.0, -2.0]).unwrap())
            .unwrap();
        let c = cfg(0.05, 0.0, 0.0);
        let mut prev = f(s.get("p").unwrap().as_slice());
        for i in 0..50 {
            let p = s.get("p").unwrap().as_slice().to_vec();
            let g = s.grad_mut("p").unwrap().as_mut_slice();
            g[0] = 6.0 * p[0];
            g[1] = p[1];
            sgd_step(&mut s, &c, i).unwrap();
            let now = f(s.get("p").unwrap().as_slice());
            assert!(now < prev);
            prev = now;
        }
    }
}
