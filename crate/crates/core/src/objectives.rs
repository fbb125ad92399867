//! Segmentation losses and the IoU metric for the binary vehicle class.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::{sigmoid, softplus, Real};

/// Pre-sigmoid vehicle scores at map resolution.
pub type SegmentationLogits<F> = Array2<F>;

/// Binary occupancy at map resolution.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct GroundTruthMap(pub Array2<bool>);

impl GroundTruthMap {
    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&v| v).count()
    }

    pub fn as_real<F: Real>(&self) -> Array2<F> {
        self.0.mapv(|v| if v { F::one() } else { F::zero() })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Iou,
    WeightedCe,
}

fn check<F: Real>(logits: &SegmentationLogits<F>, gt: &GroundTruthMap) -> Result<()> {
    if logits.dim() != gt.dim() {
        return Err(Error::Argument(format!(
            "logits {:?} and ground truth {:?} differ in shape",
            logits.dim(),
            gt.dim()
        )));
    }
    Ok(())
}

/// Smoothed IoU loss on sigmoid probabilities: `1 - (1 + I) / (1 + U)`.
pub fn iou_loss<F: Real>(logits: &SegmentationLogits<F>, gt: &GroundTruthMap) -> Result<F> {
    Ok(iou_loss_with_grad(logits, gt)?.0)
}

/// The loss and its gradient with respect to the logits.
pub fn iou_loss_with_grad<F: Real>(
    logits: &SegmentationLogits<F>,
    gt: &GroundTruthMap,
) -> Result<(F, Array2<F>)> {
    check(logits, gt)?;
    let p = logits.mapv(sigmoid);
    let (mut inter, mut union) = (F::zero(), F::zero());
    Zip::from(&p).and(&gt.0).for_each(|&p, &g| {
        let g = if g { F::one() } else { F::zero() };
        inter += p * g;
        union += p + g - p * g;
    });
    let num = F::one() + inter;
    let den = F::one() + union;
    let loss = F::one() - num / den;
    let grad = Zip::from(&p).and(&gt.0).map_collect(|&p, &g| {
        let g = if g { F::one() } else { F::zero() };
        // d(num)/dp = g, d(den)/dp = 1 - g
        let dp = -(g * den - num * (F::one() - g)) / (den * den);
        dp * p * (F::one() - p)
    });
    Ok((loss, grad))
}

/// Mean of `-[w g log s(l) + (1 - g) log(1 - s(l))]` in softplus form.
pub fn weighted_cross_entropy<F: Real>(
    logits: &SegmentationLogits<F>,
    gt: &GroundTruthMap,
    pos_weight: F,
) -> Result<F> {
    Ok(weighted_cross_entropy_with_grad(logits, gt, pos_weight)?.0)
}

pub fn weighted_cross_entropy_with_grad<F: Real>(
    logits: &SegmentationLogits<F>,
    gt: &GroundTruthMap,
    pos_weight: F,
) -> Result<(F, Array2<F>)> {
    check(logits, gt)?;
    if !(pos_weight > F::zero()) {
        return Err(Error::Argument(format!("pos_weight must be positive, got {pos_weight}")));
    }
    let n = F::lit(logits.len() as f64);
    let mut total = F::zero();
    let grad = Zip::from(logits).and(&gt.0).map_collect(|&l, &g| {
        if g {
            total += pos_weight * softplus(-l);
            pos_weight * (sigmoid(l) - F::one()) / n
        } else {
            total += softplus(l);
            sigmoid(l) / n
        }
    });
    Ok((total / n, grad))
}

/// Dispatches to the configured loss.
pub fn loss_with_grad<F: Real>(
    kind: LossKind,
    logits: &SegmentationLogits<F>,
    gt: &GroundTruthMap,
    pos_weight: f64,
) -> Result<(F, Array2<F>)> {
    match kind {
        LossKind::Iou => iou_loss_with_grad(logits, gt),
        LossKind::WeightedCe => weighted_cross_entropy_with_grad(logits, gt, F::lit(pos_weight)),
    }
}

/// Binarized IoU; two empty masks score 1.
pub fn iou_metric<F: Real>(logits: &SegmentationLogits<F>, gt: &GroundTruthMap, threshold: f64) -> Result<f64> {
    check(logits, gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    Zip::from(logits).and(&gt.0).for_each(|&l, &g| {
        let pred = sigmoid(l).as_f64() >= threshold;
        inter += (pred && g) as usize;
        union += (pred || g) as usize;
    });
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}
