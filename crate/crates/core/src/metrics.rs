//! Balanced accuracy, per-trait reports and temporal smoothing of
//! per-frame trait probabilities.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ground-truth totals and correct predictions for one binary trait.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    /// `N_p`: ground-truth positives.
    pub positives: u64,
    /// `N_n`: ground-truth negatives.
    pub negatives: u64,
    /// `n_p`: true positives.
    pub true_positives: u64,
    /// `n_n`: true negatives.
    pub true_negatives: u64,
}

impl ConfusionCounts {
    pub fn new(positives: u64, negatives: u64, true_positives: u64, true_negatives: u64) -> Result<Self> {
        if true_positives > positives || true_negatives > negatives {
            return Err(Error::InvalidArgument(format!(
                "inconsistent counts: n_p={true_positives} > N_p={positives} or n_n={true_negatives} > N_n={negatives}"
            )));
        }
        Ok(Self {
            positives,
            negatives,
            true_positives,
            true_negatives,
        })
    }

    pub fn record(&mut self, predicted: bool, actual: bool) {
        match actual {
            true => {
                self.positives += 1;
                self.true_positives += predicted as u64;
            }
            false => {
                self.negatives += 1;
                self.true_negatives += !predicted as u64;
            }
        }
    }
}

/// `0.5 (n_p / N_p + n_n / N_n)`; `None` when either class is absent.
pub fn balanced_accuracy(c: &ConfusionCounts) -> Option<f64> {
    if c.positives == 0 || c.negatives == 0 {
        return None;
    }
    Some(0.5 * (c.true_positives as f64 / c.positives as f64 + c.true_negatives as f64 / c.negatives as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraitRow {
    pub name: String,
    pub counts: ConfusionCounts,
    /// `None` marks an undefined metric (a class with no samples).
    pub balanced_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraitReport {
    pub threshold: f64,
    pub rows: Vec<TraitRow>,
    /// Unweighted mean over traits with a defined metric.
    pub mean: Option<f64>,
}

impl TraitReport {
    /// Thresholds `predictions` (`p >= threshold` is positive) and scores
    /// them against `labels`; `None` labels are skipped.
    pub fn compute(
        names: &[&str],
        predictions: &[Vec<f64>],
        labels: &[Vec<Option<bool>>],
        threshold: f64,
    ) -> Result<Self> {
        if predictions.len() != labels.len() {
            return Err(Error::ShapeMismatch {
                axis: "samples",
                expected: labels.len(),
                actual: predictions.len(),
            });
        }
        let mut counts = alloc::vec![ConfusionCounts::default(); names.len()];
        for (i, (p, l)) in predictions.iter().zip(labels).enumerate() {
            if p.len() != names.len() || l.len() != names.len() {
                return Err(Error::InvalidArgument(format!(
                    "sample {i}: expected {} traits, got {} predictions and {} labels",
                    names.len(),
                    p.len(),
                    l.len()
                )));
            }
            for ((c, &pv), lv) in counts.iter_mut().zip(p).zip(l) {
                if let Some(actual) = *lv {
                    c.record(pv >= threshold, actual);
                }
            }
        }
        let rows: Vec<TraitRow> = names
            .iter()
            .zip(counts)
            .map(|(n, c)| TraitRow {
                name: n.to_string(),
                counts: c,
                balanced_accuracy: balanced_accuracy(&c),
            })
            .collect();
        let defined: Vec<f64> = rows.iter().filter_map(|r| r.balanced_accuracy).collect();
        let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        Ok(Self { threshold, rows, mean })
    }

    /// Convenience for fully labelled binary targets.
    pub fn from_binary(names: &[&str], predictions: &[Vec<f64>], labels: &[Vec<bool>], threshold: f64) -> Result<Self> {
        let labels: Vec<Vec<Option<bool>>> = labels.iter().map(|l| l.iter().map(|&v| Some(v)).collect()).collect();
        Self::compute(names, predictions, &labels, threshold)
    }
}

/// Per-frame probabilities of one trait.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraitProfile {
    pub frames: Vec<u64>,
    pub probabilities: Vec<f64>,
}

impl TraitProfile {
    pub fn new(frames: Vec<u64>, probabilities: Vec<f64>) -> Result<Self> {
        if frames.len() != probabilities.len() {
            return Err(Error::ShapeMismatch {
                axis: "profile frames",
                expected: frames.len(),
                actual: probabilities.len(),
            });
        }
        if frames.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("frame indices must be strictly increasing".to_string()));
        }
        Ok(Self { frames, probabilities })
    }
}

/// Centered moving average over `window` neighbouring entries. Near the ends
/// the window is truncated to the available frames.
pub fn smooth_profile(profile: &TraitProfile, window: usize) -> Result<TraitProfile> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("smoothing window must be odd and >= 1, got {window}")));
    }
    let half = window / 2;
    let p = &profile.probabilities;
    let smoothed = (0..p.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(p.len() - 1);
            let win = &p[lo..=hi];
            let mean = win.iter().sum::<f64>() / win.len() as f64;
            let (min, max) = win.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            mean.clamp(min, max)
        })
        .collect();
    Ok(TraitProfile {
        frames: profile.frames.clone(),
        probabilities: smoothed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn balanced_accuracy_examples() {
        let perfect = ConfusionCounts::new(10, 30, 10, 30).unwrap();
        assert_eq!(balanced_accuracy(&perfect), Some(1.0));
        let all_pos = ConfusionCounts::new(418, 7041, 418, 0).unwrap();
        assert_eq!(balanced_accuracy(&all_pos), Some(0.5));
        let c = ConfusionCounts::new(100, 40, 50, 30).unwrap();
        assert_eq!(balanced_accuracy(&c), Some(0.625));
        assert_eq!(balanced_accuracy(&ConfusionCounts::new(0, 5, 0, 5).unwrap()), None);
        assert!(ConfusionCounts::new(3, 5, 4, 0).is_err());
    }

    #[test]
    fn report_perfect_and_complement() {
        let labels = vec![vec![true, false], vec![false, true], vec![true, true], vec![false, false]];
        let preds: Vec<Vec<f64>> = labels.iter().map(|l| l.iter().map(|&b| if b { 0.9 } else { 0.1 }).collect()).collect();
        let r = TraitReport::from_binary(&["a", "b"], &preds, &labels, 0.5).unwrap();
        assert_eq!(r.mean, Some(1.0));
        let inv: Vec<Vec<f64>> = preds.iter().map(|p| p.iter().map(|v| 1.0 - v).collect()).collect();
        let r = TraitReport::from_binary(&["a", "b"], &inv, &labels, 0.5).unwrap();
        assert!(r.rows.iter().all(|row| row.balanced_accuracy == Some(0.0)));
        assert!(TraitReport::from_binary(&["a", "b"], &inv[..3], &labels, 0.5).is_err());
    }

    #[test]
    fn undefined_traits_excluded_from_mean() {
        let labels = vec![vec![Some(true), None], vec![Some(false), None]];
        let preds = vec![vec![0.9, 0.2], vec![0.8, 0.4]];
        let r = TraitReport::compute(&["a", "b"], &preds, &labels, 0.5).unwrap();
        assert_eq!(r.rows[1].balanced_accuracy, None);
        assert_eq!(r.mean, Some(0.5));
    }

    #[test]
    fn smoothing_fixtures() {
        let prof = TraitProfile::new((0..5).collect(), vec![0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let s = smooth_profile(&prof, 5).unwrap();
        assert_eq!(s.probabilities[2], 0.2);
        assert_eq!(s.probabilities[0], 1.0 / 3.0);
        assert_eq!(smooth_profile(&prof, 1).unwrap(), prof);
        let c = TraitProfile::new((0..7).collect(), vec![0.3; 7]).unwrap();
        assert_eq!(smooth_profile(&c, 5).unwrap(), c);
        assert!(smooth_profile(&prof, 4).is_err());
        let empty = TraitProfile::new(vec![], vec![]).unwrap();
        assert!(smooth_profile(&empty, 5).unwrap().probabilities.is_empty());
        assert!(TraitProfile::new(vec![1, 1], vec![0.5, 0.5]).is_err());
    }
}
