//! Class prototypes and the Polyak (EMA) parameter average.

use ndarray::{Array1, Array2, ArrayView2};

use crate::embedder::{Architecture, ModelParams};
use crate::{Error, Result};

pub const DEFAULT_EMA_BETA: f64 = 0.99;

/// Mean of the support embeddings per class. `assignments[i]` is the class of
/// support row i; every class in `0..n_classes` needs at least one row.
pub fn compute(
    z_support: ArrayView2<f64>,
    assignments: &[usize],
    n_classes: usize,
) -> Result<Array2<f64>> {
    if assignments.len() != z_support.nrows() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} assignments", z_support.nrows()),
            got: format!("{}", assignments.len()),
        });
    }
    let m = z_support.ncols();
    let mut sums = Array2::zeros((n_classes, m));
    let mut counts = vec![0usize; n_classes];
    for (i, &k) in assignments.iter().enumerate() {
        assert!(k < n_classes, "class assignment out of range");
        let mut row = sums.row_mut(k);
        row += &z_support.row(i);
        counts[k] += 1;
    }
    for (k, &count) in counts.iter().enumerate() {
        if count == 0 {
            return Err(Error::EmptyClassSupport(k));
        }
        let mut row = sums.row_mut(k);
        row /= count as f64;
    }
    Ok(sums)
}

/// Distributes a gradient on the prototypes back to the support embeddings:
/// each support row receives its class gradient divided by the class count.
pub fn backward(
    d_prototypes: ArrayView2<f64>,
    assignments: &[usize],
    n_classes: usize,
) -> Array2<f64> {
    let m = d_prototypes.ncols();
    let mut counts = vec![0usize; n_classes];
    for &k in assignments {
        counts[k] += 1;
    }
    let mut dz = Array2::zeros((assignments.len(), m));
    for (i, &k) in assignments.iter().enumerate() {
        let scale = 1.0 / counts[k] as f64;
        let mut row = dz.row_mut(i);
        row.assign(&d_prototypes.row(k));
        row *= scale;
    }
    dz
}

/// Exponential moving average of the flat parameter vector:
/// ema_t = beta * ema_{t-1} + (1 - beta) * theta_t, no bias correction.
/// Updated once per episode step, after the optimizer step.
#[derive(Debug, Clone)]
pub struct EmaParams {
    pub values: Array1<f64>,
    pub beta: f64,
    pub enabled: bool,
}

impl EmaParams {
    /// Starts the average at a copy of the given parameters.
    pub fn init(params: &ModelParams, beta: f64, enabled: bool) -> EmaParams {
        assert!((0.0..=1.0).contains(&beta));
        EmaParams { values: params.to_flat(), beta, enabled }
    }

    pub fn update(&mut self, params: &ModelParams) -> Result<()> {
        if !self.enabled {
            return Ok(());
        }
        let theta = params.to_flat();
        if theta.len() != self.values.len() {
            return Err(Error::LengthMismatch { expected: self.values.len(), got: theta.len() });
        }
        for (e, t) in self.values.iter_mut().zip(theta.iter()) {
            *e = self.beta * *e + (1.0 - self.beta) * t;
        }
        Ok(())
    }

    /// Materializes the averaged parameters.
    pub fn model(&self, arch: &Architecture) -> Result<ModelParams> {
        ModelParams::from_flat(arch, self.values.view())
    }
}
