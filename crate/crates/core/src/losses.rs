//! Sequential classification, distance and confidence losses.
//!
//! Each loss is averaged over the T steps of a segment and summed over
//! classes; the batch total is the plain sum of per-sample totals.

use crate::annotation::SegmentTarget;
use crate::error::{Error, Result};
use crate::model::PredictionSequence;

pub const BCE_EPS: f64 = 1e-7;
const IOU_DENOM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub class_loss: f64,
    pub dist_loss: f64,
    pub conf_loss: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(class_loss: f64, dist_loss: f64, conf_loss: f64) -> Self {
        Self {
            class_loss,
            dist_loss,
            conf_loss,
            total: class_loss + dist_loss + conf_loss,
        }
    }

    pub fn accumulate(&mut self, other: &LossBreakdown) {
        *self = LossBreakdown::new(
            self.class_loss + other.class_loss,
            self.dist_loss + other.dist_loss,
            self.conf_loss + other.conf_loss,
        );
    }
}

fn check(target: &SegmentTarget, pred: &PredictionSequence) -> Result<()> {
    if target.t_len != pred.t_len || target.n_classes != pred.n_classes {
        return Err(Error::ShapeMismatch(format!(
            "target {}x{} vs prediction {}x{}",
            target.t_len, target.n_classes, pred.t_len, pred.n_classes
        )));
    }
    Ok(())
}

fn bce(y: f64, yhat: f64) -> f64 {
    let p = yhat.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -y * p.ln() - (1.0 - y) * (1.0 - p).ln()
}

/// Intersection-over-union of the true and estimated boundary distances.
/// A vanishing union yields 0.
pub fn boundary_iou(p: f64, p_hat: f64, q: f64, q_hat: f64) -> f64 {
    let union = p.max(p_hat) + q.max(q_hat);
    if union < IOU_DENOM_FLOOR {
        0.0
    } else {
        (p.min(p_hat) + q.min(q_hat)) / union
    }
}

pub fn class_loss(target: &SegmentTarget, pred: &PredictionSequence) -> Result<f64> {
    check(target, pred)?;
    let mut sum = 0.0;
    for t in 0..target.t_len {
        for c in 0..target.n_classes {
            sum += bce(target.get(t, c).y, pred.y(t, c));
        }
    }
    Ok(sum / target.t_len as f64)
}

pub fn dist_loss(target: &SegmentTarget, pred: &PredictionSequence) -> Result<f64> {
    check(target, pred)?;
    let mut sum = 0.0;
    for t in 0..target.t_len {
        for c in 0..target.n_classes {
            let g = target.get(t, c);
            sum += (g.p - pred.p(t, c)).powi(2) + (g.q - pred.q(t, c)).powi(2);
        }
    }
    Ok(sum / target.t_len as f64)
}

pub fn conf_loss(target: &SegmentTarget, pred: &PredictionSequence) -> Result<f64> {
    check(target, pred)?;
    let mut sum = 0.0;
    for t in 0..target.t_len {
        for c in 0..target.n_classes {
            let g = target.get(t, c);
            let iou = boundary_iou(g.p, pred.p(t, c), g.q, pred.q(t, c));
            sum += (g.y - iou).powi(2);
        }
    }
    Ok(sum / target.t_len as f64)
}

pub fn sample_loss(target: &SegmentTarget, pred: &PredictionSequence) -> Result<LossBreakdown> {
    Ok(LossBreakdown::new(
        class_loss(target, pred)?,
        dist_loss(target, pred)?,
        conf_loss(target, pred)?,
    ))
}

pub fn total_loss(batch: &[(&SegmentTarget, &PredictionSequence)]) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut acc = LossBreakdown::default();
    for (target, pred) in batch {
        acc.accumulate(&sample_loss(target, pred)?);
    }
    Ok(acc)
}

/// Loss of one sample and its gradient w.r.t. `pred.values`.
///
/// min/max ties send the derivative to the target side, so the estimate gets
/// none; clamped likelihoods get zero gradient.
pub fn loss_and_grad(
    target: &SegmentTarget,
    pred: &PredictionSequence,
) -> Result<(LossBreakdown, Vec<f64>)> {
    check(target, pred)?;
    let inv_t = 1.0 / target.t_len as f64;
    let mut grad = vec![0.0; pred.values.len()];
    let (mut lc, mut ld, mut lf) = (0.0, 0.0, 0.0);
    for t in 0..target.t_len {
        for c in 0..target.n_classes {
            let g = target.get(t, c);
            let base = (t * target.n_classes + c) * 3;
            let (yh, ph, qh) = (
                pred.values[base],
                pred.values[base + 1],
                pred.values[base + 2],
            );

            lc += bce(g.y, yh);
            if yh > BCE_EPS && yh < 1.0 - BCE_EPS {
                grad[base] += inv_t * (-g.y / yh + (1.0 - g.y) / (1.0 - yh));
            }

            ld += (g.p - ph).powi(2) + (g.q - qh).powi(2);
            grad[base + 1] += inv_t * 2.0 * (ph - g.p);
            grad[base + 2] += inv_t * 2.0 * (qh - g.q);

            let num = g.p.min(ph) + g.q.min(qh);
            let den = g.p.max(ph) + g.q.max(qh);
            if den < IOU_DENOM_FLOOR {
                lf += g.y * g.y;
                continue;
            }
            let iou = num / den;
            lf += (g.y - iou).powi(2);
            let outer = -2.0 * (g.y - iou) * inv_t;
            let d_num_p = if ph < g.p { 1.0 } else { 0.0 };
            let d_den_p = if ph > g.p { 1.0 } else { 0.0 };
            let d_num_q = if qh < g.q { 1.0 } else { 0.0 };
            let d_den_q = if qh > g.q { 1.0 } else { 0.0 };
            grad[base + 1] += outer * (d_num_p * den - num * d_den_p) / (den * den);
            grad[base + 2] += outer * (d_num_q * den - num * d_den_q) / (den * den);
        }
    }
    Ok((LossBreakdown::new(lc * inv_t, ld * inv_t, lf * inv_t), grad))
}
