//! Adam and the plateau learning-rate schedule.

use crate::error::{Error, Result};
use crate::gradmod::GradientSet;
use crate::params::ParamStore;

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Writes `grads` into the store's gradient slots and applies one update.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradientSet) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads.iter() {
            let p = store.get_mut(name)?;
            if g.len() != p.value.len() {
                return Err(Error::Scope(format!("adam: `{name}` has {} grads for {} values", g.len(), p.value.len())));
            }
            p.grad.data_mut().copy_from_slice(g);
            let (m, v, w) = (p.m.data_mut(), p.v.data_mut(), p.value.data_mut());
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                w[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
            if !p.value.is_finite() {
                return Err(Error::NonFinite(format!("adam update of `{name}`")));
            }
        }
        Ok(())
    }
}

/// Halves the learning rate when the validation metric stalls.
///
/// Epochs are numbered from 1. Up to and including `halve_after_epoch` the
/// rate is constant; after it, `patience` consecutive epochs without a new
/// best halve the rate. The stall counter resets on halving and on
/// improvement. The best value is tracked from the first epoch.
#[derive(Clone, Debug)]
pub struct PlateauScheduler {
    lr: f64,
    patience: usize,
    halve_after_epoch: usize,
    best: Option<f64>,
    stall: usize,
    halvings: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, patience: usize, halve_after_epoch: usize) -> Self {
        Self {
            lr,
            patience,
            halve_after_epoch,
            best: None,
            stall: 0,
            halvings: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn halvings(&self) -> usize {
        self.halvings
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// Feeds the validation metric of `epoch` (higher is better). Returns
    /// whether it is a new best.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> bool {
        let improved = self.best.is_none_or(|b| metric > b);
        if improved {
            self.best = Some(metric);
            self.stall = 0;
        } else if epoch > self.halve_after_epoch {
            self.stall += 1;
            if self.stall >= self.patience {
                self.lr /= 2.0;
                self.halvings += 1;
                self.stall = 0;
            }
        }
        improved
    }
}

/// Learning rate in effect after the given validation history.
pub fn lr_schedule(history: &[f64], lr: f64, patience: usize, halve_after_epoch: usize) -> f64 {
    let mut s = PlateauScheduler::new(lr, patience, halve_after_epoch);
    for (i, &m) in history.iter().enumerate() {
        s.observe(i + 1, m);
    }
    s.lr()
}
