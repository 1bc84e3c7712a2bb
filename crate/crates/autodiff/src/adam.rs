//! Adam optimizer with bias correction and fully serializable moments.

use crate::Var;
use ndarray::prelude::*;
use std::collections::HashSet;

struct Slot {
    var: Var,
    m: ArrayD<f64>,
    v: ArrayD<f64>,
}

pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    slots: Vec<Slot>,
}

/// Snapshot of optimizer state, keyed by parameter name.
pub struct AdamState {
    pub t: u64,
    pub moments: Vec<(String, ArrayD<f64>, ArrayD<f64>)>,
}

impl Adam {
    /// Builds an optimizer over `params`. Vars that alias the same storage are
    /// deduplicated so shared weights receive exactly one update per step.
    pub fn new(params: Vec<Var>, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Adam {
        let mut seen: HashSet<usize> = HashSet::new();
        let mut slots = Vec::new();
        for var in params {
            if !seen.insert(var.storage_ptr()) {
                continue;
            }
            let dim = var.value().raw_dim();
            slots.push(Slot {
                m: ArrayD::zeros(dim.clone()),
                v: ArrayD::zeros(dim),
                var,
            });
        }
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            slots,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Applies one update from the gradients currently accumulated in the
    /// parameter sinks. Does not clear gradients; see [`Adam::zero_grads`].
    pub fn step(&mut self) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (self.beta1, self.beta2);
        for slot in &mut self.slots {
            let grad = slot.var.grad();
            slot.m
                .zip_mut_with(&grad, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            slot.v
                .zip_mut_with(&grad, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            drop(grad);
            let (lr, eps) = (self.lr, self.eps);
            let (m, v) = (&slot.m, &slot.v);
            slot.var.with_value_mut(|val| {
                ndarray::Zip::from(val).and(m).and(v).for_each(|p, &m, &v| {
                    *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
                });
            });
        }
    }

    pub fn zero_grads(&self) {
        for slot in &self.slots {
            slot.var.zero_grad();
        }
    }

    pub fn state(&self) -> AdamState {
        AdamState {
            t: self.t,
            moments: self
                .slots
                .iter()
                .map(|s| (s.var.name().to_string(), s.m.clone(), s.v.clone()))
                .collect(),
        }
    }

    /// Restores moments by parameter name. Every slot must be present in the
    /// snapshot with a matching shape.
    pub fn load_state(&mut self, state: &AdamState) -> Result<(), String> {
        self.t = state.t;
        let by_name: std::collections::BTreeMap<&str, (&ArrayD<f64>, &ArrayD<f64>)> = state
            .moments
            .iter()
            .map(|(n, m, v)| (n.as_str(), (m, v)))
            .collect();
        for slot in &mut self.slots {
            let Some((m, v)) = by_name.get(slot.var.name()) else {
                return Err(format!("missing optimizer state for {}", slot.var.name()));
            };
            if m.shape() != slot.m.shape() || v.shape() != slot.v.shape() {
                return Err(format!(
                    "optimizer state shape mismatch for {}",
                    slot.var.name()
                ));
            }
            slot.m.assign(m);
            slot.v.assign(v);
        }
        Ok(())
    }

    /// Parameter names in slot order.
    pub fn param_names(&self) -> Vec<String> {
        self.slots
            .iter()
            .map(|s| s.var.name().to_string())
            .collect()
    }
}
