//! Central finite-difference verification of analytic gradients.

use alloc::format;
use alloc::string::{String, ToString};

use crate::error::{Error, Result};
use crate::params::{ParamKind, ParameterSet};

/// Neumaier-compensated sum: `hi` is the plain running sum and `lo` the
/// accumulated rounding error, so `hi + lo` resolves the total far below one
/// ulp of `hi`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CompensatedSum {
    pub hi: f64,
    pub lo: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, term: f64) {
        let s = self.hi + term;
        self.lo += if self.hi.abs() >= term.abs() {
            (self.hi - s) + term
        } else {
            (term - s) + self.hi
        };
        self.hi = s;
    }

    pub fn value(&self) -> f64 {
        self.hi + self.lo
    }

    /// `self - other` with the parts differenced before they are collapsed.
    pub fn difference(&self, other: &Self) -> f64 {
        (self.hi - other.hi) + (self.lo - other.lo)
    }
}

/// A scalar objective over a parameter set.
pub trait Objective {
    fn loss(&self, params: &ParameterSet) -> Result<f64>;

    /// The loss as a compensated sum of its terms, for finite differencing.
    fn loss_sum(&self, params: &ParameterSet) -> Result<CompensatedSum> {
        Ok(CompensatedSum { hi: self.loss(params)?, lo: 0.0 })
    }

    /// Evaluates the loss and writes `d loss / d param` into every gradient
    /// slot (slots are overwritten, not accumulated).
    fn loss_and_grad(&self, params: &mut ParameterSet) -> Result<f64>;
}

pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, 1e-6)` for analytic `a` and numeric `n`; the
/// floor keeps round-off in near-zero gradients from dominating.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares the analytic gradient of `objective` at `params` with central
/// differences of step `epsilon` for every scalar parameter and returns the
/// largest relative error.
pub fn finite_diff_check(objective: &impl Objective, params: &ParameterSet, epsilon: f64) -> Result<GradCheckReport> {
    if !(1e-6..=1e-4).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!("epsilon {epsilon} outside [1e-6, 1e-4]")));
    }
    let mut analytic = params.clone();
    analytic.zero_grad();
    objective.loss_and_grad(&mut analytic)?;
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    let names: alloc::vec::Vec<String> = params.names().map(|s| s.to_string()).collect();
    for name in &names {
        let grad = analytic.get(name)?.grad().map(|g| g.to_vec()).unwrap_or_default();
        let n = params.get(name)?.len();
        for i in 0..n {
            let original = probe.get(name)?.data()[i];
            probe.get_mut(name)?.data_mut()[i] = original + epsilon;
            let up = objective.loss_sum(&probe)?;
            probe.get_mut(name)?.data_mut()[i] = original - epsilon;
            let down = objective.loss_sum(&probe)?;
            probe.get_mut(name)?.data_mut()[i] = original;
            let numeric = up.difference(&down) / (2.0 * epsilon);
            let a = grad.get(i).copied().unwrap_or(0.0);
            let err = relative_error(a, numeric);
            if !(err <= report.max_rel_error) {
                report.max_rel_error = err;
                report.worst_param = name.clone();
                report.worst_index = i;
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Adds the decay gradient `2 lambda w` of every weight tensor to its
/// gradient slot, matching [`crate::params::weight_decay_term`].
pub fn add_decay_gradient(params: &mut ParameterSet, lambda: f64) {
    if lambda == 0.0 {
        return;
    }
    for p in params.iter_mut() {
        if p.kind == ParamKind::Weight {
            let (w, g) = p.tensor.data_and_grad_mut();
            for (gv, wv) in g.iter_mut().zip(w.iter()) {
                *gv += 2.0 * lambda * wv;
            }
        }
    }
}
