//! Named parameter storage and the Adam optimizer.

use std::collections::BTreeMap;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named trainable tensors, iterated in sorted name order everywhere so that
/// updates and checkpoints are deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.params.insert(name.into(), tensor.with_requires_grad(true));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    /// Register every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &Tape) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| (name.clone(), tape.leaf(t)))
            .collect();
        BoundParams { vars }
    }
}

/// Tape leaves for one forward/backward pass, one per named parameter.
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> &Var {
        self.vars
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    /// Gradients accumulated on the bound leaves, keyed by parameter name.
    pub fn grads(&self) -> BTreeMap<String, Vec<f64>> {
        self.vars
            .iter()
            .map(|(name, v)| (name.clone(), v.grad()))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Epochs at which the learning rate is multiplied by `lr_drop_factor`.
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr_drop_epochs: vec![25, 125],
            lr_drop_factor: 0.1,
        }
    }
}

/// Adam with bias correction. First and second moments are kept per named
/// parameter; the step counter is shared.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Learning rate after applying every configured drop at or before `epoch`.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let drops = self
            .cfg
            .lr_drop_epochs
            .iter()
            .filter(|&&e| epoch >= e)
            .count();
        self.cfg.lr * self.cfg.lr_drop_factor.powi(drops as i32)
    }

    /// Apply one update. Every parameter in `params` must have an entry in
    /// `grads` of matching length.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Vec<f64>>,
        lr: f64,
    ) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for (name, tensor) in params.params.iter_mut() {
            let g = grads.get(name).ok_or_else(|| Error::Contract {
                op: "adam_step",
                detail: format!("missing gradient for parameter {name}"),
            })?;
            if g.len() != tensor.numel() {
                return Err(Error::dimension(
                    "adam_step",
                    format!("gradient length {} != parameter {} length {}", g.len(), name, tensor.numel()),
                ));
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let vals = tensor.values_mut();
            for i in 0..g.len() {
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g[i];
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                vals[i] -= lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}
