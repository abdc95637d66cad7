//! Episodic loss: independent binary cross-entropy per query-class pair on
//! the fused distance, summed (not averaged) over the episode.
//!
//! The per-pair probability is sigmoid(-D), so small distance means "this
//! class". Treating each class as its own binary task makes multilabel
//! queries first-class citizens.

use ndarray::{Array1, Array2, ArrayView2};

use crate::evaluator::sigmoid;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct LossValue {
    /// Sum over all query-class pairs.
    pub total: f64,
    /// Per-class partial sums, mostly for diagnostics.
    pub per_class: Array1<f64>,
    /// dL/dD, same shape as the fused matrix: y - sigmoid(-D).
    pub grad: Array2<f64>,
}

/// Numerically stable binary cross-entropy with logits. With x = -D and
/// target y, each term is max(x, 0) - x*y + ln(1 + exp(-|x|)); saturated
/// pairs stay finite for any |D|.
pub fn loss(fused: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<LossValue> {
    if fused.dim() != targets.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", fused.dim()),
            got: format!("{:?}", targets.dim()),
        });
    }
    let (nq, nc) = fused.dim();
    let mut total = 0.0;
    let mut per_class = Array1::zeros(nc);
    let mut grad = Array2::zeros((nq, nc));
    for q in 0..nq {
        for k in 0..nc {
            let y = targets[[q, k]];
            if y != 0.0 && y != 1.0 {
                return Err(Error::NonBinaryLabel { row: q, class: k, value: y });
            }
            let x = -fused[[q, k]];
            let term = x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
            total += term;
            per_class[k] += term;
            grad[[q, k]] = y - sigmoid(x);
        }
    }
    Ok(LossValue { total, per_class, grad })
}
