//! Group weights on the probability simplex and their exponentiated-gradient
//! ascent update.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assignment::AssignmentMatrix;

/// Soft column mass below which a group is treated as empty in a batch.
pub const EMPTY_GROUP_MASS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WeightsError {
    #[error("group loss {index} is not finite: {value}")]
    NonFiniteLoss { index: usize, value: f64 },
    #[error("expected {expected} group losses, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("invalid group weights: {0}")]
    Invalid(String),
}

/// A strictly positive vector over `M` groups summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GroupWeights(Vec<f64>);

impl GroupWeights {
    pub fn uniform(groups: usize) -> Self {
        assert!(groups > 0, "need at least one group");
        Self(vec![1.0 / groups as f64; groups])
    }

    pub fn new(values: Vec<f64>) -> Result<Self, WeightsError> {
        if values.is_empty() {
            return Err(WeightsError::Invalid("empty weight vector".into()));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(WeightsError::Invalid(format!("entry {v} is not positive")));
        }
        let total: f64 = values.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(WeightsError::Invalid(format!("entries sum to {total}")));
        }
        Ok(Self(values))
    }

    /// Normalize arbitrary positive values onto the simplex.
    pub fn from_unnormalized(values: &[f64]) -> Result<Self, WeightsError> {
        let total: f64 = values.iter().sum();
        Self::new(values.iter().map(|v| v / total).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn get(&self, j: usize) -> f64 {
        self.0[j]
    }
}

/// One exponentiated-gradient ascent step: `q_j <- q_j exp(eta * L_j)`,
/// renormalized. The gradient of `sum_j q_j L_j` with respect to `q_j` is
/// `L_j`, so the per-group losses enter directly.
///
/// Computed in log space with a log-sum-exp normalizer.
pub fn exp_ascent(
    q: &GroupWeights,
    group_losses: &[f64],
    eta_q: f64,
) -> Result<GroupWeights, WeightsError> {
    if group_losses.len() != q.len() {
        return Err(WeightsError::LengthMismatch {
            expected: q.len(),
            actual: group_losses.len(),
        });
    }
    if let Some((index, &value)) = group_losses
        .iter()
        .enumerate()
        .find(|(_, v)| !v.is_finite())
    {
        return Err(WeightsError::NonFiniteLoss { index, value });
    }
    let logits: Vec<f64> = q
        .0
        .iter()
        .zip(group_losses)
        .map(|(qj, lj)| qj.ln() + eta_q * lj)
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let unnorm: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = unnorm.iter().sum();
    let mut out: Vec<f64> = unnorm.iter().map(|u| u / total).collect();
    // Keep every entry strictly positive even after extreme steps.
    let floor = f64::MIN_POSITIVE;
    if out.iter().any(|v| *v < floor) {
        for v in &mut out {
            *v = v.max(floor);
        }
        let s: f64 = out.iter().sum();
        for v in &mut out {
            *v /= s;
        }
    }
    Ok(GroupWeights(out))
}

/// Per-group soft average losses `L_j = sum_i g_ij l_i / sum_i g_ij`.
///
/// A group whose soft mass is below [`EMPTY_GROUP_MASS`] gets `L_j = 0`, so
/// the weight update leaves its relative weight untouched by a 0/0 ratio.
pub fn soft_group_losses(assign: &AssignmentMatrix, losses: &[f64]) -> Vec<f64> {
    assert_eq!(assign.rows(), losses.len(), "losses/assignment length mismatch");
    let m = assign.cols();
    let mut num = vec![0.0; m];
    let mut den = vec![0.0; m];
    for (i, &l) in losses.iter().enumerate() {
        for (j, g) in assign.row(i).iter().enumerate() {
            num[j] += g * l;
            den[j] += g;
        }
    }
    num.iter()
        .zip(&den)
        .map(|(n, d)| if *d < EMPTY_GROUP_MASS { 0.0 } else { n / d })
        .collect()
}
