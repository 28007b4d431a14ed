//! Named parameter storage, weight decay and the SGD update.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcheck::CompensatedSum;
use crate::tensor::Tensor;

/// Whether a parameter is penalized by weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor,
}

/// Ordered collection of uniquely named trainable tensors.
///
/// Iteration order is insertion order, which keeps every reduction over
/// parameters deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, kind: ParamKind, mut tensor: Tensor) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidArgument(alloc::format!("duplicate parameter name `{name}`")));
        }
        tensor.grad_mut();
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            kind,
            tensor,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.params[i].tensor)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.params[i].tensor),
            None => Err(Error::UnknownParameter(name.to_string())),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    /// Drops every parameter whose name does not satisfy `keep`.
    pub fn retain(&mut self, mut keep: impl FnMut(&str) -> bool) {
        self.params.retain(|p| keep(&p.name));
        self.index = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
    }
}

/// `lambda * Σ ||w||²` over weight tensors; biases are not penalized.
pub fn weight_decay_term(params: &ParameterSet, lambda: f64) -> f64 {
    lambda
        * params
            .iter()
            .filter(|p| p.kind == ParamKind::Weight)
            .map(|p| p.tensor.sum_of_squares())
            .sum::<f64>()
}

/// Adds the decay term to `acc`, one term per weight tensor.
pub fn add_weight_decay_terms(params: &ParameterSet, lambda: f64, acc: &mut CompensatedSum) {
    for p in params.iter().filter(|p| p.kind == ParamKind::Weight) {
        acc.add(lambda * p.tensor.sum_of_squares());
    }
}

/// `w <- w - lr * (grad + 2 lambda w)` for weights (biases skip the decay
/// term), then clears every gradient.
pub fn sgd_step(params: &mut ParameterSet, lr: f64, lambda: f64) -> Result<()> {
    sgd_step_scaled(params, lr, lambda, |_| 1.0)
}

/// As [`sgd_step`], with a per-parameter learning-rate multiplier.
pub fn sgd_step_scaled(
    params: &mut ParameterSet,
    lr: f64,
    lambda: f64,
    lr_scale: impl Fn(&str) -> f64,
) -> Result<()> {
    if lambda < 0.0 || !lr.is_finite() {
        return Err(Error::InvalidArgument("lambda must be non-negative and lr finite".to_string()));
    }
    for p in params.iter() {
        let g = p
            .tensor
            .grad()
            .ok_or_else(|| Error::MissingContext(alloc::format!("parameter `{}` has no gradient", p.name)))?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
    }
    for p in params.iter_mut() {
        let rate = lr * lr_scale(&p.name);
        let decay = match p.kind {
            ParamKind::Weight => 2.0 * lambda,
            ParamKind::Bias => 0.0,
        };
        let (w, g) = p.tensor.data_and_grad_mut();
        for (wv, gv) in w.iter_mut().zip(g.iter_mut()) {
            let step = rate * (*gv + decay * *wv);
            // a zero step must leave the bits of w untouched (including -0.0)
            if step != 0.0 {
                *wv -= step;
            }
            *gv = 0.0;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn single(w: f64, g: f64) -> ParameterSet {
        let mut ps = ParameterSet::new();
        ps.insert("w", ParamKind::Weight, Tensor::vector(vec![w])).unwrap();
        ps.get_mut("w").unwrap().grad_mut()[0] = g;
        ps
    }

    #[test]
    fn decay_term_values() {
        let mut ps = ParameterSet::new();
        ps.insert("w", ParamKind::Weight, Tensor::zeros(&[3, 4])).unwrap();
        assert_eq!(weight_decay_term(&ps, 0.7), 0.0);
        let ps = single(2.0, 0.0);
        assert_eq!(weight_decay_term(&ps, 1.0), 4.0);
        let mut ps = single(2.0, 0.0);
        ps.insert("b", ParamKind::Bias, Tensor::vector(vec![5.0])).unwrap();
        assert_eq!(weight_decay_term(&ps, 1.0), 4.0);
    }

    #[test]
    fn trace_equals_sum_of_squares() {
        let w: Vec<f64> = (0..12).map(|i| libm::sin(i as f64 * 1.3) * 2.0).collect();
        // tr(W Wᵀ) = Σ_i Σ_k W_ik W_ik
        let mut trace = 0.0;
        for i in 0..3 {
            let mut row = 0.0;
            for k in 0..4 {
                row += w[i * 4 + k] * w[i * 4 + k];
            }
            trace += row;
        }
        let mut ps = ParameterSet::new();
        ps.insert("W", ParamKind::Weight, Tensor::new(vec![3, 4], w).unwrap()).unwrap();
        assert!((weight_decay_term(&ps, 1.0) - trace).abs() < 1e-12);
    }

    #[test]
    fn sgd_updates() {
        let mut ps = single(1.0, 0.0);
        sgd_step(&mut ps, 0.1, 0.0).unwrap();
        assert_eq!(ps.get("w").unwrap().data()[0], 1.0);
        let mut ps = single(1.0, 0.0);
        sgd_step(&mut ps, 0.1, 0.5).unwrap();
        assert!((ps.get("w").unwrap().data()[0] - 0.9).abs() < 1e-15);
        let mut ps = single(-0.0, 3.0);
        sgd_step(&mut ps, 0.0, 0.5).unwrap();
        assert_eq!(ps.get("w").unwrap().data()[0].to_bits(), (-0.0f64).to_bits());
        assert_eq!(ps.get("w").unwrap().grad().unwrap()[0], 0.0);
    }

    #[test]
    fn sgd_refuses_nan() {
        let mut ps = single(1.0, f64::NAN);
        assert_eq!(sgd_step(&mut ps, 0.1, 0.0), Err(Error::NonFiniteGradient("w".into())));
        assert_eq!(ps.get("w").unwrap().data()[0], 1.0);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut ps = single(3.0, 0.0);
        for _ in 0..100 {
            let w = ps.get("w").unwrap().data()[0];
            ps.get_mut("w").unwrap().grad_mut()[0] = 2.0 * w;
            sgd_step(&mut ps, 0.1, 0.0).unwrap();
        }
        let w = ps.get("w").unwrap().data()[0];
        assert!(w * w < 1e-6);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = single(1.0, 0.0);
        assert!(ps.insert("w", ParamKind::Bias, Tensor::vector(vec![0.0])).is_err());
    }
}
