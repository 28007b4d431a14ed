//! Cross-dataset attribute network: the shared trunk followed by 20 sigmoid
//! heads, trained with a masked cross-entropy in which missing labels
//! contribute no error.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{batch_iter, ATTRIBUTES, NUM_ATTRIBUTES};
use crate::error::{Error, Result};
use crate::gradcheck::{add_decay_gradient, CompensatedSum, Objective};
use crate::layers::{bce_with_logit, fc_backward_into, fc_forward, sigmoid};
use crate::metrics::TraitReport;
use crate::network::{NetworkSpec, TrunkTrace};
use crate::params::{add_weight_decay_terms, sgd_step_scaled, weight_decay_term, ParamKind, ParameterSet};
use crate::tensor::Tensor;
use crate::train::{normalize_batch_grads, EpochRecord, Hyper, TrainFailure, TrainingLog};

pub const HEAD_WEIGHT: &str = "attr.heads.weight";
pub const HEAD_BIAS: &str = "attr.heads.bias";

/// One training face: the crop, its network-ready bridging input and the
/// masked labels.
#[derive(Debug, Clone)]
pub struct AttrExample {
    pub image: Tensor,
    pub bridge: Vec<f64>,
    pub labels: Vec<Option<bool>>,
}

#[derive(Debug, Clone)]
pub struct AttrForward {
    pub features: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub trace: TrunkTrace,
}

#[derive(Debug, Clone)]
pub struct AttributeNet {
    pub spec: NetworkSpec,
    pub params: ParameterSet,
}

impl AttributeNet {
    /// He-initialized trunk, heads drawn from N(0, 0.01²), zero biases.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        spec.init_params(&mut params, &mut rng)?;
        let f = spec.feature_dim()?;
        let normal = Normal::new(0.0, 0.01).expect("valid std");
        params.insert(HEAD_WEIGHT, ParamKind::Weight, Tensor::from_fn(&[f, NUM_ATTRIBUTES], |_| normal.sample(&mut rng)))?;
        params.insert(HEAD_BIAS, ParamKind::Bias, Tensor::zeros(&[NUM_ATTRIBUTES]))?;
        Ok(Self { spec, params })
    }

    pub fn from_params(spec: NetworkSpec, params: ParameterSet) -> Result<Self> {
        check_attr_params(&spec, &params)?;
        Ok(Self { spec, params })
    }

    pub fn forward(&self, image: &Tensor, bridge: &[f64]) -> Result<AttrForward> {
        attr_forward(&self.spec, &self.params, image, bridge)
    }

    pub fn predict(&self, image: &Tensor, bridge: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(image, bridge)?.probs)
    }
}

pub fn check_attr_params(spec: &NetworkSpec, params: &ParameterSet) -> Result<()> {
    spec.check_params(params)?;
    let f = spec.feature_dim()?;
    for (name, shape) in [(HEAD_WEIGHT, vec![f, NUM_ATTRIBUTES]), (HEAD_BIAS, vec![NUM_ATTRIBUTES])] {
        let t = params.get(name)?;
        if t.shape() != shape.as_slice() {
            return Err(Error::ArchitectureMismatch(format!("{name}: expected shape {shape:?}, found {:?}", t.shape())));
        }
    }
    Ok(())
}

/// Trunk, then `p_l = sigmoid(w_lᵀ x + b_l)` for every attribute head.
pub fn attr_forward(spec: &NetworkSpec, params: &ParameterSet, image: &Tensor, bridge: &[f64]) -> Result<AttrForward> {
    let (features, trace) = spec.forward(params, image, bridge)?;
    let logits = fc_forward(&features, params.get(HEAD_WEIGHT)?, params.get(HEAD_BIAS)?)?;
    let probs = logits.iter().map(|&z| sigmoid(z)).collect();
    Ok(AttrForward {
        features,
        logits,
        probs,
        trace,
    })
}

/// Masked cross-entropy over the attribute heads. Returns the summed loss of
/// the present labels and `d loss / d logit`, which is `p - y` for present
/// labels and exactly zero for missing ones.
pub fn masked_attr_loss(logits: &[f64], labels: &[Option<bool>]) -> Result<(f64, Vec<f64>)> {
    if logits.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            axis: "attribute labels",
            expected: logits.len(),
            actual: labels.len(),
        });
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for ((g, &z), l) in grad.iter_mut().zip(logits).zip(labels) {
        if let Some(y) = *l {
            let (li, gi) = bce_with_logit(z, if y { 1.0 } else { 0.0 })?;
            loss += li;
            *g = gi;
        }
    }
    Ok((loss, grad))
}

/// Accumulates the gradients of one sample's masked loss into `params` and
/// returns the loss. Samples without any present label skip the backward
/// pass entirely.
pub fn attr_backward(spec: &NetworkSpec, params: &mut ParameterSet, fwd: &AttrForward, labels: &[Option<bool>]) -> Result<f64> {
    let (loss, dz) = masked_attr_loss(&fwd.logits, labels)?;
    if dz.iter().all(|&g| g == 0.0) {
        return Ok(loss);
    }
    let mut dx = vec![0.0; fwd.features.len()];
    let mut db = params.get_mut(HEAD_BIAS)?.take_grad();
    let w = params.get_mut(HEAD_WEIGHT)?;
    let mut dw = w.take_grad();
    let res = fc_backward_into(&fwd.features, w, &dz, Some(&mut dx), &mut dw, &mut db);
    w.set_grad(dw)?;
    params.get_mut(HEAD_BIAS)?.set_grad(db)?;
    res?;
    spec.backward(params, &fwd.trace, &dx)?;
    Ok(loss)
}

/// Sum of masked losses over `examples` plus `lambda` weight decay, as a
/// function of the parameters.
pub struct AttrObjective<'a> {
    pub spec: &'a NetworkSpec,
    pub examples: &'a [AttrExample],
    pub lambda: f64,
}

impl Objective for AttrObjective<'_> {
    fn loss(&self, params: &ParameterSet) -> Result<f64> {
        Ok(self.loss_sum(params)?.value())
    }

    fn loss_sum(&self, params: &ParameterSet) -> Result<CompensatedSum> {
        let mut acc = CompensatedSum::default();
        add_weight_decay_terms(params, self.lambda, &mut acc);
        for ex in self.examples {
            let fwd = attr_forward(self.spec, params, &ex.image, &ex.bridge)?;
            for (&z, l) in fwd.logits.iter().zip(&ex.labels) {
                if let Some(y) = *l {
                    acc.add(bce_with_logit(z, if y { 1.0 } else { 0.0 })?.0);
                }
            }
        }
        Ok(acc)
    }

    fn loss_and_grad(&self, params: &mut ParameterSet) -> Result<f64> {
        params.zero_grad();
        let mut total = weight_decay_term(params, self.lambda);
        for ex in self.examples {
            let fwd = attr_forward(self.spec, params, &ex.image, &ex.bridge)?;
            total += attr_backward(self.spec, params, &fwd, &ex.labels)?;
        }
        add_decay_gradient(params, self.lambda);
        Ok(total)
    }
}

/// Runs one SGD step on the given batch: gradients are summed over the
/// batch, divided by the nominal batch size and applied with decay.
/// Returns the summed data loss.
pub fn attr_train_step(net: &mut AttributeNet, batch: &[&AttrExample], lr: f64, hyper: &Hyper) -> Result<f64> {
    net.params.zero_grad();
    let mut loss = 0.0;
    for ex in batch {
        let fwd = net.forward(&ex.image, &ex.bridge)?;
        loss += attr_backward(&net.spec, &mut net.params, &fwd, &ex.labels)?;
    }
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("non-finite training loss {loss}")));
    }
    normalize_batch_grads(&mut net.params, hyper.batch_size);
    sgd_step_scaled(&mut net.params, lr, hyper.lambda, |n| hyper.scale_for(n))?;
    Ok(loss)
}

/// Per-attribute balanced accuracy of `net` on `examples` at threshold 0.5.
pub fn attr_report(net: &AttributeNet, examples: &[AttrExample]) -> Result<TraitReport> {
    let mut preds = Vec::with_capacity(examples.len());
    let mut labels = Vec::with_capacity(examples.len());
    for ex in examples {
        preds.push(net.predict(&ex.image, &ex.bridge)?);
        labels.push(ex.labels.clone());
    }
    TraitReport::compute(&ATTRIBUTES, &preds, &labels, 0.5)
}

/// Masked SGD over the union of the corpora. Each epoch is a seeded
/// permutation of all training samples, so batches mix corpora in proportion
/// to their sizes. On a non-finite loss or gradient the network is restored
/// to the parameters of the last finished epoch and the failure is returned.
pub fn pretrain(
    net: &mut AttributeNet,
    train: &[AttrExample],
    validation: &[AttrExample],
    hyper: &Hyper,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> core::result::Result<TrainingLog, TrainFailure> {
    let fail = |error, epoch, log: &TrainingLog| TrainFailure {
        error,
        epoch,
        log: log.clone(),
    };
    let mut log = TrainingLog::default();
    hyper.validate().map_err(|e| fail(e, 0, &log))?;
    for epoch in 0..hyper.epochs {
        let snapshot = net.params.clone();
        let lr = hyper.lr_at(epoch);
        let batches = batch_iter(train.len(), hyper.batch_size, hyper.seed, epoch as u64).map_err(|e| fail(e, epoch, &log))?;
        let mut loss = 0.0;
        for batch in batches {
            let refs: Vec<&AttrExample> = batch.iter().map(|&i| &train[i]).collect();
            match attr_train_step(net, &refs, lr, hyper) {
                Ok(l) => loss += l,
                Err(e) => {
                    net.params = snapshot;
                    return Err(fail(e, epoch, &log));
                }
            }
        }
        let validation = if validation.is_empty() {
            None
        } else {
            Some(attr_report(net, validation).map_err(|e| fail(e, epoch, &log))?)
        };
        let record = EpochRecord {
            epoch,
            lr,
            loss: loss / train.len().max(1) as f64,
            validation,
        };
        on_epoch(&record);
        log.epochs.push(record);
    }
    Ok(log)
}
