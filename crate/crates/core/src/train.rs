//! Shared SGD schedule, hyperparameters and training logs.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::TraitReport;
use crate::params::ParameterSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyper {
    pub lr: f64,
    /// Fraction of the epoch budget after which the rate is multiplied by
    /// `lr_decay`.
    pub lr_decay_at: f64,
    pub lr_decay: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Learning-rate multiplier for `trunk.*` parameters.
    pub trunk_lr_scale: f64,
    /// Learning-rate multiplier for the attribute or relation heads.
    pub head_lr_scale: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            lr: 0.01,
            lr_decay_at: 2.0 / 3.0,
            lr_decay: 0.1,
            lambda: 5e-4,
            batch_size: 64,
            epochs: 30,
            seed: 0,
            trunk_lr_scale: 1.0,
            head_lr_scale: 1.0,
        }
    }
}

impl Hyper {
    /// Attribute pre-training defaults of the desk profiles.
    pub fn pretrain_defaults() -> Self {
        Self {
            lr: 0.2,
            epochs: 24,
            ..Self::default()
        }
    }

    /// Relation fine-tuning defaults: the trunk moves at a tenth of the base
    /// rate and the heads at thirty times it.
    pub fn relation_defaults() -> Self {
        Self {
            lr: 0.01,
            batch_size: 32,
            epochs: 20,
            trunk_lr_scale: 0.1,
            head_lr_scale: 30.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(String::from(msg)));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.lr_decay_at) {
            return bad("lr_decay_at must lie in [0, 1]");
        }
        if !(self.lr_decay >= 0.0 && self.lr_decay.is_finite()) {
            return bad("lr_decay must be finite and non-negative");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.trunk_lr_scale >= 0.0 && self.trunk_lr_scale.is_finite()) {
            return bad("trunk_lr_scale must be finite and non-negative");
        }
        if !(self.head_lr_scale >= 0.0 && self.head_lr_scale.is_finite()) {
            return bad("head_lr_scale must be finite and non-negative");
        }
        Ok(())
    }

    /// Step-decayed learning rate for `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let boundary = libm::ceil(self.lr_decay_at * self.epochs as f64) as usize;
        if epoch >= boundary {
            self.lr * self.lr_decay
        } else {
            self.lr
        }
    }

    pub fn scale_for(&self, name: &str) -> f64 {
        if name.starts_with("trunk.") {
            self.trunk_lr_scale
        } else if name.contains(".heads.") {
            self.head_lr_scale
        } else {
            1.0
        }
    }
}

/// Divides every accumulated gradient by the nominal batch size, so a
/// batch's step is independent of which unlabeled samples it also holds.
pub fn normalize_batch_grads(params: &mut ParameterSet, batch_size: usize) {
    let inv = 1.0 / batch_size as f64;
    for p in params.iter_mut() {
        p.tensor.grad_mut().iter_mut().for_each(|g| *g *= inv);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean data loss per training sample (decay excluded).
    pub loss: f64,
    pub validation: Option<TraitReport>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
}

/// A run that stopped on a non-finite loss or gradient. The model it was
/// training has been restored to the parameters of the last finished epoch.
#[derive(Debug, Clone)]
pub struct TrainFailure {
    pub error: Error,
    pub epoch: usize,
    pub log: TrainingLog,
}
