//! Training losses: a boundary-sensitive overlap loss whose sensitivity
//! factor γ grows as targets get bulkier relative to their boundary, binary
//! cross-entropy, and their weighted combination.
//!
//! Each loss exists twice: a scalar-loop eager form (the public reference
//! API) and a tape form used during training. A property test pins the two
//! to each other.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::util::inner_boundary_pixels;
use crate::{Error, Mask, Result};

/// Probability clamp for cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

/// Boundary/size statistics of a ground-truth mask.
///
/// `gamma = 1 − t_c/t_s` when the mask is nonempty; an empty mask gets
/// `gamma = 1` so that false positives on target-free slices are still
/// penalized without dividing by zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruthStats {
    /// Foreground pixels lying on the 4-connectivity inner boundary.
    pub t_c: usize,
    /// Total foreground pixels.
    pub t_s: usize,
    pub gamma: f64,
}

/// Soft confusion counts over a probability map against a binary mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftConfusion {
    pub tp: f64,
    pub fp: f64,
    pub fn_: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_bd: f64,
    pub lambda_ce: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_bd: 0.5, lambda_ce: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_bd < 0.0 || self.lambda_ce < 0.0 {
            return Err(Error::contract("loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// Pure function of the ground truth only.
pub fn boundary_stats(gt: &Mask) -> GroundTruthStats {
    let t_s = gt.iter().filter(|&&v| v > 0).count();
    let t_c = inner_boundary_pixels(gt).len();
    let gamma = if t_s > 0 { 1.0 - t_c as f64 / t_s as f64 } else { 1.0 };
    GroundTruthStats { t_c, t_s, gamma }
}

fn validate_shapes(pred: &Array2<f64>, gt: &Mask) -> Result<()> {
    if pred.dim() != gt.dim() {
        return Err(Error::contract(format!(
            "prediction shape {:?} does not match mask shape {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    Ok(())
}

fn validate_probabilities(pred: &Array2<f64>) -> Result<()> {
    if pred.iter().any(|&p| !(0.0..=1.0).contains(&p) || p.is_nan()) {
        return Err(Error::contract("prediction values must lie in [0, 1]"));
    }
    Ok(())
}

/// TP = Σ p·g, FP = Σ p·(1−g), FN = Σ (1−p)·g.
pub fn soft_confusion(pred: &Array2<f64>, gt: &Mask) -> Result<SoftConfusion> {
    validate_shapes(pred, gt)?;
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut fn_ = 0.0;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        if g > 0 {
            tp += p;
            fn_ += 1.0 - p;
        } else {
            fp += p;
        }
    }
    Ok(SoftConfusion { tp, fp, fn_ })
}

/// 1 − 2γ·TP / (2γ·TP + FP + FN); defined as 0 when the denominator is 0.
pub fn boundary_sensitive_loss(pred: &Array2<f64>, gt: &Mask) -> Result<f64> {
    validate_shapes(pred, gt)?;
    validate_probabilities(pred)?;
    let stats = boundary_stats(gt);
    let conf = soft_confusion(pred, gt)?;
    let num = 2.0 * stats.gamma * conf.tp;
    let den = num + conf.fp + conf.fn_;
    if den == 0.0 {
        return Ok(0.0);
    }
    Ok(1.0 - num / den)
}

/// Mean over pixels of −[g·log p + (1−g)·log(1−p)] with p clamped to
/// [ε, 1−ε].
pub fn bce_loss(pred: &Array2<f64>, gt: &Mask) -> Result<f64> {
    validate_shapes(pred, gt)?;
    let mut acc = 0.0;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        acc -= if g > 0 { p.ln() } else { (1.0 - p).ln() };
    }
    Ok(acc / pred.len() as f64)
}

/// lambda_bd·L_bd + lambda_ce·L_ce for one image.
pub fn combo_loss(pred: &Array2<f64>, gt: &Mask, weights: &LossWeights) -> Result<f64> {
    weights.validate()?;
    let bd = boundary_sensitive_loss(pred, gt)?;
    let ce = bce_loss(pred, gt)?;
    Ok(weights.lambda_bd * bd + weights.lambda_ce * ce)
}

fn mask_constants(tape: &mut Tape, pred_dim: (usize, usize), gt: &Mask) -> (NodeId, NodeId) {
    assert_eq!(pred_dim, gt.dim(), "loss shapes must match");
    let g = gt.mapv(|v| if v > 0 { 1.0 } else { 0.0 });
    let one_minus_g = g.mapv(|v| 1.0 - v);
    (tape.constant(g), tape.constant(one_minus_g))
}

/// Tape form of [`boundary_sensitive_loss`], differentiable in `pred`
/// wherever the denominator is positive.
pub fn boundary_sensitive_loss_node(tape: &mut Tape, pred: NodeId, gt: &Mask) -> NodeId {
    let stats = boundary_stats(gt);
    let (g, one_minus_g) = mask_constants(tape, tape.value(pred).dim(), gt);
    let tp_terms = tape.mul(pred, g);
    let tp = tape.sum(tp_terms);
    let fp_terms = tape.mul(pred, one_minus_g);
    let fp = tape.sum(fp_terms);
    let one_minus_p = tape.affine(pred, -1.0, 1.0);
    let fn_terms = tape.mul(one_minus_p, g);
    let fn_ = tape.sum(fn_terms);
    let num = tape.scale(tp, 2.0 * stats.gamma);
    let den = tape.add(num, fp);
    let den = tape.add(den, fn_);
    if tape.scalar(den) == 0.0 {
        return tape.constant(Array2::zeros((1, 1)));
    }
    let ratio = tape.div(num, den);
    tape.affine(ratio, -1.0, 1.0)
}

/// Tape form of [`bce_loss`].
pub fn bce_loss_node(tape: &mut Tape, pred: NodeId, gt: &Mask) -> NodeId {
    let (g, one_minus_g) = mask_constants(tape, tape.value(pred).dim(), gt);
    let p = tape.clamp(pred, BCE_EPS, 1.0 - BCE_EPS);
    let log_p = tape.log(p);
    let one_minus_p = tape.affine(p, -1.0, 1.0);
    let log_one_minus_p = tape.log(one_minus_p);
    let pos = tape.mul(g, log_p);
    let neg = tape.mul(one_minus_g, log_one_minus_p);
    let terms = tape.add(pos, neg);
    let mean = tape.mean(terms);
    tape.scale(mean, -1.0)
}

/// Tape form of [`combo_loss`] for one image.
pub fn combo_loss_node(
    tape: &mut Tape,
    pred: NodeId,
    gt: &Mask,
    weights: &LossWeights,
) -> NodeId {
    let bd = boundary_sensitive_loss_node(tape, pred, gt);
    let ce = bce_loss_node(tape, pred, gt);
    let bd_w = tape.scale(bd, weights.lambda_bd);
    let ce_w = tape.scale(ce, weights.lambda_ce);
    tape.add(bd_w, ce_w)
}
