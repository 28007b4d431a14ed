//! Siamese relation model: one trunk applied to both faces, a ReLU
//! projection of the concatenated features to a shared representation, and
//! eight sigmoid trait heads over `[x_s; x_t]`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attribute::AttributeNet;
use crate::data::{batch_iter, inverse_frequency_order, NUM_RELATIONS, RELATIONS, SPATIAL_CUE_DIM};
use crate::error::{Error, Result};
use crate::gradcheck::{add_decay_gradient, CompensatedSum, Objective};
use crate::layers::{bce_with_logit, fc_backward_into, fc_forward, sigmoid};
use crate::metrics::TraitReport;
use crate::network::{NetworkSpec, TrunkTrace};
use crate::params::{add_weight_decay_terms, sgd_step_scaled, weight_decay_term, ParamKind, ParameterSet};
use crate::tensor::Tensor;
use crate::train::{normalize_batch_grads, EpochRecord, Hyper, TrainFailure, TrainingLog};

pub const PROJ_WEIGHT: &str = "rel.proj.weight";
pub const PROJ_BIAS: &str = "rel.proj.bias";
pub const HEAD_WEIGHT: &str = "rel.heads.weight";
pub const HEAD_BIAS: &str = "rel.heads.bias";

/// Ablation switches applied at relation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationSwitches {
    /// When false the bridging inputs of both faces are replaced by zeros.
    pub bridge: bool,
    /// When false `x_s` is replaced by zeros.
    pub spatial: bool,
}

impl Default for RelationSwitches {
    fn default() -> Self {
        Self { bridge: true, spatial: true }
    }
}

/// A face pair prepared for the network.
#[derive(Debug, Clone)]
pub struct PairExample {
    pub left: Tensor,
    pub right: Tensor,
    pub bridge_left: Vec<f64>,
    pub bridge_right: Vec<f64>,
    pub cues: [f64; SPATIAL_CUE_DIM],
    pub labels: [bool; NUM_RELATIONS],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationConfig {
    pub network: NetworkSpec,
    pub projection_dim: usize,
    pub switches: RelationSwitches,
}

/// The trunk lives once in `params` under `trunk.*`; both branches read it.
#[derive(Debug, Clone)]
pub struct RelationModel {
    pub config: RelationConfig,
    pub params: ParameterSet,
}

#[derive(Debug, Clone)]
pub struct RelForward {
    pub x_left: Vec<f64>,
    pub x_right: Vec<f64>,
    pub trace_left: TrunkTrace,
    pub trace_right: TrunkTrace,
    /// `[x_l; x_r]`.
    pub concat: Vec<f64>,
    /// Projection before the ReLU.
    pub proj_pre: Vec<f64>,
    /// `[x_s; x_t]`.
    pub head_input: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

fn add_heads(params: &mut ParameterSet, feature_dim: usize, projection_dim: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    let normal = Normal::new(0.0, 0.01).expect("valid std");
    params.insert(
        PROJ_WEIGHT,
        ParamKind::Weight,
        Tensor::from_fn(&[2 * feature_dim, projection_dim], |_| normal.sample(rng)),
    )?;
    params.insert(PROJ_BIAS, ParamKind::Bias, Tensor::zeros(&[projection_dim]))?;
    params.insert(
        HEAD_WEIGHT,
        ParamKind::Weight,
        Tensor::from_fn(&[SPATIAL_CUE_DIM + projection_dim, NUM_RELATIONS], |_| normal.sample(rng)),
    )?;
    params.insert(HEAD_BIAS, ParamKind::Bias, Tensor::zeros(&[NUM_RELATIONS]))?;
    Ok(())
}

impl RelationModel {
    /// Randomly initialized model: He-initialized trunk, projection and
    /// heads from N(0, 0.01²).
    pub fn new(config: RelationConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        config.network.init_params(&mut params, &mut rng)?;
        let f = config.network.feature_dim()?;
        let mut head_rng = ChaCha8Rng::seed_from_u64(seed);
        head_rng.set_stream(1);
        add_heads(&mut params, f, config.projection_dim, &mut head_rng)?;
        Ok(Self { config, params })
    }

    /// Copies the trunk of a pre-trained attribute network bit-exactly and
    /// draws fresh projection and head weights. The attribute heads are not
    /// carried over.
    pub fn from_pretrained(config: RelationConfig, attr: &AttributeNet, seed: u64) -> Result<Self> {
        let diff = config.network.diff(&attr.spec);
        if !diff.is_empty() {
            return Err(Error::ArchitectureMismatch(diff.join("; ")));
        }
        config.network.check_params(&attr.params)?;
        let mut params = attr.params.clone();
        params.retain(|n| n.starts_with("trunk."));
        params.zero_grad();
        let mut head_rng = ChaCha8Rng::seed_from_u64(seed);
        head_rng.set_stream(1);
        add_heads(&mut params, config.network.feature_dim()?, config.projection_dim, &mut head_rng)?;
        Ok(Self { config, params })
    }

    pub fn from_params(config: RelationConfig, params: ParameterSet) -> Result<Self> {
        check_relation_params(&config, &params)?;
        Ok(Self { config, params })
    }

    pub fn forward(&self, ex: &PairExample) -> Result<RelForward> {
        relation_forward(&self.config, &self.params, ex)
    }

    pub fn predict(&self, ex: &PairExample) -> Result<Vec<f64>> {
        Ok(self.forward(ex)?.probs)
    }
}

pub fn check_relation_params(config: &RelationConfig, params: &ParameterSet) -> Result<()> {
    config.network.check_params(params)?;
    let f = config.network.feature_dim()?;
    let p = config.projection_dim;
    let expected = [
        (PROJ_WEIGHT, vec![2 * f, p]),
        (PROJ_BIAS, vec![p]),
        (HEAD_WEIGHT, vec![SPATIAL_CUE_DIM + p, NUM_RELATIONS]),
        (HEAD_BIAS, vec![NUM_RELATIONS]),
    ];
    for (name, shape) in &expected {
        let t = params.get(name)?;
        if t.shape() != shape.as_slice() {
            return Err(Error::ArchitectureMismatch(format!("{name}: expected shape {shape:?}, found {:?}", t.shape())));
        }
    }
    let known = params.iter().filter(|p| p.name.starts_with("trunk.")).count() + expected.len();
    if known != params.len() {
        let extra: Vec<String> = params
            .names()
            .filter(|n| !n.starts_with("trunk.") && !expected.iter().any(|(e, _)| e == n))
            .map(String::from)
            .collect();
        return Err(Error::ArchitectureMismatch(format!("unexpected parameters: {}", extra.join(", "))));
    }
    Ok(())
}

pub fn relation_forward(config: &RelationConfig, params: &ParameterSet, ex: &PairExample) -> Result<RelForward> {
    let zeros;
    let (bl, br) = if config.switches.bridge {
        (ex.bridge_left.as_slice(), ex.bridge_right.as_slice())
    } else {
        zeros = vec![0.0; config.network.bridge_dim];
        (zeros.as_slice(), zeros.as_slice())
    };
    let (x_left, trace_left) = config.network.forward(params, &ex.left, bl)?;
    let (x_right, trace_right) = config.network.forward(params, &ex.right, br)?;
    let mut concat = x_left.clone();
    concat.extend_from_slice(&x_right);
    let proj_pre = fc_forward(&concat, params.get(PROJ_WEIGHT)?, params.get(PROJ_BIAS)?)?;
    let mut head_input = if config.switches.spatial { ex.cues.to_vec() } else { vec![0.0; SPATIAL_CUE_DIM] };
    head_input.extend(proj_pre.iter().map(|&v| if v > 0.0 { v } else { 0.0 }));
    let logits = fc_forward(&head_input, params.get(HEAD_WEIGHT)?, params.get(HEAD_BIAS)?)?;
    let probs = logits.iter().map(|&z| sigmoid(z)).collect();
    Ok(RelForward {
        x_left,
        x_right,
        trace_left,
        trace_right,
        concat,
        proj_pre,
        head_input,
        logits,
        probs,
    })
}

/// Summed cross-entropy over the eight traits and `d loss / d logit`.
pub fn relation_data_loss(logits: &[f64], labels: &[bool; NUM_RELATIONS]) -> Result<(f64, Vec<f64>)> {
    if logits.len() != NUM_RELATIONS {
        return Err(Error::ShapeMismatch {
            axis: "relation logits",
            expected: NUM_RELATIONS,
            actual: logits.len(),
        });
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; NUM_RELATIONS];
    for ((g, &z), &y) in grad.iter_mut().zip(logits).zip(labels) {
        let (l, d) = bce_with_logit(z, if y { 1.0 } else { 0.0 })?;
        loss += l;
        *g = d;
    }
    Ok((loss, grad))
}

/// Data loss plus `lambda` times the squared norm of every weight tensor.
/// The trunk is stored once, so its decay is counted once.
pub fn relation_loss(config: &RelationConfig, params: &ParameterSet, ex: &PairExample, lambda: f64) -> Result<f64> {
    let fwd = relation_forward(config, params, ex)?;
    Ok(relation_data_loss(&fwd.logits, &ex.labels)?.0 + weight_decay_term(params, lambda))
}

/// Gradients of the data loss with respect to the two branch features.
#[derive(Debug, Clone)]
pub struct BranchGrads {
    pub loss: f64,
    pub d_left: Vec<f64>,
    pub d_right: Vec<f64>,
}

/// Accumulates head and projection gradients and returns the upstream
/// gradients of both branches, without touching the trunk.
pub fn relation_head_backward(params: &mut ParameterSet, fwd: &RelForward, labels: &[bool; NUM_RELATIONS]) -> Result<BranchGrads> {
    let (loss, dz) = relation_data_loss(&fwd.logits, labels)?;
    let mut d_head_in = vec![0.0; fwd.head_input.len()];
    {
        let mut db = params.get_mut(HEAD_BIAS)?.take_grad();
        let w = params.get_mut(HEAD_WEIGHT)?;
        let mut dw = w.take_grad();
        let res = fc_backward_into(&fwd.head_input, w, &dz, Some(&mut d_head_in), &mut dw, &mut db);
        w.set_grad(dw)?;
        params.get_mut(HEAD_BIAS)?.set_grad(db)?;
        res?;
    }
    let d_proj: Vec<f64> = d_head_in[SPATIAL_CUE_DIM..]
        .iter()
        .zip(&fwd.proj_pre)
        .map(|(&g, &pre)| if pre > 0.0 { g } else { 0.0 })
        .collect();
    let mut d_concat = vec![0.0; fwd.concat.len()];
    {
        let mut db = params.get_mut(PROJ_BIAS)?.take_grad();
        let w = params.get_mut(PROJ_WEIGHT)?;
        let mut dw = w.take_grad();
        let res = fc_backward_into(&fwd.concat, w, &d_proj, Some(&mut d_concat), &mut dw, &mut db);
        w.set_grad(dw)?;
        params.get_mut(PROJ_BIAS)?.set_grad(db)?;
        res?;
    }
    let d_right = d_concat.split_off(fwd.x_left.len());
    Ok(BranchGrads {
        loss,
        d_left: d_concat,
        d_right,
    })
}

/// Full backward pass of one pair: both branches accumulate into the single
/// trunk, so the trunk gradient is the sum of the two branch contributions.
pub fn relation_backward(config: &RelationConfig, params: &mut ParameterSet, fwd: &RelForward, labels: &[bool; NUM_RELATIONS]) -> Result<f64> {
    let g = relation_head_backward(params, fwd, labels)?;
    config.network.backward(params, &fwd.trace_left, &g.d_left)?;
    config.network.backward(params, &fwd.trace_right, &g.d_right)?;
    Ok(g.loss)
}

pub struct RelObjective<'a> {
    pub config: &'a RelationConfig,
    pub examples: &'a [PairExample],
    pub lambda: f64,
}

impl Objective for RelObjective<'_> {
    fn loss(&self, params: &ParameterSet) -> Result<f64> {
        Ok(self.loss_sum(params)?.value())
    }

    fn loss_sum(&self, params: &ParameterSet) -> Result<CompensatedSum> {
        let mut acc = CompensatedSum::default();
        add_weight_decay_terms(params, self.lambda, &mut acc);
        for ex in self.examples {
            let fwd = relation_forward(self.config, params, ex)?;
            for (&z, &y) in fwd.logits.iter().zip(&ex.labels) {
                acc.add(bce_with_logit(z, if y { 1.0 } else { 0.0 })?.0);
            }
        }
        Ok(acc)
    }

    fn loss_and_grad(&self, params: &mut ParameterSet) -> Result<f64> {
        params.zero_grad();
        let mut total = weight_decay_term(params, self.lambda);
        for ex in self.examples {
            let fwd = relation_forward(self.config, params, ex)?;
            total += relation_backward(self.config, params, &fwd, &ex.labels)?;
        }
        add_decay_gradient(params, self.lambda);
        Ok(total)
    }
}

pub fn relation_train_step(model: &mut RelationModel, batch: &[&PairExample], lr: f64, hyper: &Hyper) -> Result<f64> {
    model.params.zero_grad();
    let mut loss = 0.0;
    for ex in batch {
        let fwd = model.forward(ex)?;
        loss += relation_backward(&model.config, &mut model.params, &fwd, &ex.labels)?;
    }
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("non-finite training loss {loss}")));
    }
    normalize_batch_grads(&mut model.params, hyper.batch_size);
    sgd_step_scaled(&mut model.params, lr, hyper.lambda, |n| hyper.scale_for(n))?;
    Ok(loss)
}

pub fn relation_report(model: &RelationModel, examples: &[PairExample], threshold: f64) -> Result<TraitReport> {
    let mut preds = Vec::with_capacity(examples.len());
    let mut labels = Vec::with_capacity(examples.len());
    for ex in examples {
        preds.push(model.predict(ex)?);
        labels.push(ex.labels.to_vec());
    }
    TraitReport::from_binary(&RELATIONS, &preds, &labels, threshold)
}

/// SGD over the training pairs with per-epoch held-out balanced accuracy.
/// With `rebalance` set, each epoch draws pairs by inverse label frequency
/// instead of a plain permutation. On a non-finite loss or gradient the
/// model is restored to the last finished epoch.
pub fn train_relation(
    model: &mut RelationModel,
    train: &[PairExample],
    heldout: &[PairExample],
    hyper: &Hyper,
    rebalance: bool,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> core::result::Result<TrainingLog, TrainFailure> {
    let fail = |error, epoch, log: &TrainingLog| TrainFailure {
        error,
        epoch,
        log: log.clone(),
    };
    let mut log = TrainingLog::default();
    hyper.validate().map_err(|e| fail(e, 0, &log))?;
    let labels: Vec<[bool; NUM_RELATIONS]> = train.iter().map(|e| e.labels).collect();
    for epoch in 0..hyper.epochs {
        let snapshot = model.params.clone();
        let lr = hyper.lr_at(epoch);
        let batches = if rebalance {
            inverse_frequency_order(&labels, hyper.seed, epoch as u64).map(|o| o.chunks(hyper.batch_size).map(|c| c.to_vec()).collect())
        } else {
            batch_iter(train.len(), hyper.batch_size, hyper.seed, epoch as u64)
        }
        .map_err(|e| fail(e, epoch, &log))?;
        let mut loss = 0.0;
        for batch in batches {
            let refs: Vec<&PairExample> = batch.iter().map(|&i| &train[i]).collect();
            match relation_train_step(model, &refs, lr, hyper) {
                Ok(l) => loss += l,
                Err(e) => {
                    model.params = snapshot;
                    return Err(fail(e, epoch, &log));
                }
            }
        }
        let validation = if heldout.is_empty() {
            None
        } else {
            Some(relation_report(model, heldout, 0.5).map_err(|e| fail(e, epoch, &log))?)
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
