//! Losses on a scalar prediction, their derivatives, and label-mean estimation.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Loss selector. The covariance loss carries a frozen label mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    Covariance { label_mean: f64 },
    Hinge,
    L2,
}

impl LossKind {
    /// Covariance loss with label mean `ybar`; requires `|ybar| < 1`.
    pub fn covariance(ybar: f64) -> Result<Self> {
        if !(ybar.abs() < 1.0) {
            return Err(Error::DegenerateLabels(ybar));
        }
        Ok(LossKind::Covariance { label_mean: ybar })
    }

    pub fn value(self, pred: f64, y: f64) -> f64 {
        loss_value(self, pred, y)
    }

    pub fn derivative(self, pred: f64, y: f64) -> f64 {
        loss_derivative(self, pred, y)
    }
}

/// `(1 - y ybar - pred (y - ybar))_+`, `max(0, 1 - y pred)` or `(pred - y)^2`.
pub fn loss_value(kind: LossKind, pred: f64, y: f64) -> f64 {
    match kind {
        LossKind::Covariance { label_mean } => (1.0 - y * label_mean - pred * (y - label_mean)).max(0.0),
        LossKind::Hinge => (1.0 - y * pred).max(0.0),
        LossKind::L2 => (pred - y) * (pred - y),
    }
}

/// Derivative in `pred`, with slope 0 at the hinge point.
pub fn loss_derivative(kind: LossKind, pred: f64, y: f64) -> f64 {
    match kind {
        LossKind::Covariance { label_mean } => {
            if 1.0 - y * label_mean - pred * (y - label_mean) > 0.0 {
                -(y - label_mean)
            } else {
                0.0
            }
        }
        LossKind::Hinge => {
            if 1.0 - y * pred > 0.0 {
                -y
            } else {
                0.0
            }
        }
        LossKind::L2 => 2.0 * (pred - y),
    }
}

/// Batch size that puts an estimate within `zeta` of the label mean with the
/// concentration constant `c_star`: `2 C* ln d / zeta^2`.
pub fn required_b1(d: usize, zeta: f64, c_star: f64) -> usize {
    (2.0 * c_star * (d as f64).ln() / (zeta * zeta)).ceil() as usize
}

/// Arithmetic mean of a label batch; warns when the batch is smaller than
/// `required_b1`.
pub fn label_mean_estimate(batch_labels: &[f64], required_b1: usize) -> Result<f64> {
    if batch_labels.is_empty() {
        return Err(Error::InvalidParams("label batch is empty".into()));
    }
    if batch_labels.len() < required_b1 {
        warn!(
            "label-mean batch has {} samples, fewer than the required {required_b1}",
            batch_labels.len()
        );
    }
    Ok(crate::data::mean(batch_labels))
}

/// Upper bound `epsilon / delta` on the misclassified fraction of a dataset
/// with `|ybar| < 1 - delta` and average covariance loss `epsilon`.
pub fn misclassification_bound(avg_cov_loss: f64, margin: f64) -> f64 {
    avg_cov_loss / margin
}

/// `+1` for `v >= 0`, else `-1`.
#[inline]
pub fn sign(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Fraction of `(pred, y)` pairs with `sign(pred) != sign(y)`.
pub fn misclassification_rate(preds: &[f64], labels: &[f64]) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    let wrong = preds.iter().zip(labels).filter(|(p, y)| sign(**p) != sign(**y)).count();
    wrong as f64 / preds.len() as f64
}

/// Mean loss over paired predictions and labels.
pub fn mean_loss(kind: LossKind, preds: &[f64], labels: &[f64]) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    preds.iter().zip(labels).map(|(&p, &y)| loss_value(kind, p, y)).sum::<f64>() / preds.len() as f64
}
