use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::{backward, mse_loss, DecoderConfig, DecoderError, DecoderWeights, POSE_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub lr: f64,
    pub iters: usize,
    pub seed: u64,
    /// Initial weights are uniform in `[-init_scale, init_scale]`.
    pub init_scale: f64,
}

impl FitOptions {
    pub fn new(lr: f64, iters: usize, seed: u64) -> Self {
        FitOptions {
            lr,
            iters,
            seed,
            init_scale: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub weights: DecoderWeights,
    /// Loss before each update, followed by the final loss (`iters + 1` entries).
    pub losses: Vec<f64>,
}

impl FitResult {
    pub fn initial_loss(&self) -> f64 {
        self.losses[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("at least one loss")
    }
}

/// Fits freshly initialized weights to one target trajectory by plain
/// gradient descent.
pub fn fit(
    h_tra: &DVector<f64>,
    gt: &[[f64; POSE_DIM]],
    cfg: &DecoderConfig,
    opts: &FitOptions,
) -> Result<FitResult, DecoderError> {
    let w = DecoderWeights::uniform(cfg.d_e, cfg.d_h, opts.init_scale, opts.seed);
    fit_from(w, h_tra, gt, cfg, opts.lr, opts.iters)
}

/// Gradient descent from the given weights.
pub fn fit_from(
    mut w: DecoderWeights,
    h_tra: &DVector<f64>,
    gt: &[[f64; POSE_DIM]],
    cfg: &DecoderConfig,
    lr: f64,
    iters: usize,
) -> Result<FitResult, DecoderError> {
    if !(lr.is_finite() && lr > 0.0) {
        return Err(DecoderError::InvalidConfig(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    let mut losses = Vec::with_capacity(iters + 1);
    for iteration in 0..iters {
        let step = backward(h_tra, &w, cfg, gt)?;
        if !step.loss.is_finite() {
            return Err(DecoderError::DivergenceDetected { iteration });
        }
        losses.push(step.loss);
        w.axpy(-lr, &step.grads);
        if w.to_flat().iter().any(|x| !x.is_finite()) {
            return Err(DecoderError::DivergenceDetected { iteration });
        }
    }
    let traj = super::decode(h_tra, &w, cfg)?;
    let last = mse_loss(&traj.as_rows(), gt)?;
    if !last.is_finite() {
        return Err(DecoderError::DivergenceDetected { iteration: iters });
    }
    losses.push(last);
    Ok(FitResult { weights: w, losses })
}
