//! Recurrent trajectory decoder.
//!
//! The hidden vector of the `<trajectory>` token is projected into the GRU
//! state space, then unrolled: each step projects the previous hidden state,
//! updates it with a GRU cell and reads a six-component pose state through a
//! sigmoid. Decoding stops once two consecutive states are closer than the
//! termination threshold, or after `max_steps` steps.

mod backward;
mod fit;
mod weights_io;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use backward::{backward, grad_fd, Gradients};
pub use fit::{fit, fit_from, FitOptions, FitResult};
pub use weights_io::WeightFile;

/// Number of components in a pose state.
pub const POSE_DIM: usize = 6;
pub const DEFAULT_THRESHOLD: f64 = 1e-3;

// Largest double below 1; sigmoid outputs are clamped into the open interval.
const ONE_MINUS: f64 = 1.0 - f64::EPSILON / 2.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DecoderError {
    #[error("dimension mismatch for {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: String,
        expected: String,
        actual: String,
    },
    #[error("invalid decoder config: {0}")]
    InvalidConfig(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("ground-truth trajectory is empty")]
    EmptyGroundTruth,
    #[error("loss became non-finite at iteration {iteration}")]
    DivergenceDetected { iteration: usize },
}

pub(crate) fn mismatch(what: &str, expected: impl ToString, actual: impl ToString) -> DecoderError {
    DecoderError::DimensionMismatch {
        what: what.to_owned(),
        expected: expected.to_string(),
        actual: actual.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub max_steps: usize,
    pub threshold: f64,
    pub d_e: usize,
    pub d_h: usize,
}

impl DecoderConfig {
    pub fn new(d_e: usize, d_h: usize, max_steps: usize) -> Self {
        DecoderConfig {
            max_steps,
            threshold: DEFAULT_THRESHOLD,
            d_e,
            d_h,
        }
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.threshold = threshold;
        self
    }

    pub fn validate(&self) -> Result<(), DecoderError> {
        if self.max_steps == 0 {
            return Err(DecoderError::InvalidConfig("max_steps must be >= 1".into()));
        }
        if !(self.threshold.is_finite() && self.threshold > 0.0) {
            return Err(DecoderError::InvalidConfig(format!(
                "termination threshold must be a positive finite number, got {}",
                self.threshold
            )));
        }
        if self.d_e == 0 || self.d_h == 0 {
            return Err(DecoderError::InvalidConfig(
                "d_e and d_h must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Decoder parameters. Matrices map column vectors: `W_latent` is
/// `d_h x d_e`, every recurrent matrix is `d_h x d_h`, `W_out` is `6 x d_h`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderWeights {
    pub w_latent: DMatrix<f64>,
    pub b_latent: DVector<f64>,
    pub w_state: DMatrix<f64>,
    pub b_state: DVector<f64>,
    pub w_z: DMatrix<f64>,
    pub u_z: DMatrix<f64>,
    pub b_z: DVector<f64>,
    pub w_r: DMatrix<f64>,
    pub u_r: DMatrix<f64>,
    pub b_r: DVector<f64>,
    pub w_c: DMatrix<f64>,
    pub u_c: DMatrix<f64>,
    pub b_c: DVector<f64>,
    pub w_out: DMatrix<f64>,
    pub b_out: DVector<f64>,
}

/// Applies `$m!(name, field)` to every parameter in file order.
macro_rules! for_each_param {
    ($m:ident) => {
        $m!("W_latent", w_latent);
        $m!("b_latent", b_latent);
        $m!("W_state", w_state);
        $m!("b_state", b_state);
        $m!("W_z", w_z);
        $m!("U_z", u_z);
        $m!("b_z", b_z);
        $m!("W_r", w_r);
        $m!("U_r", u_r);
        $m!("b_r", b_r);
        $m!("W_c", w_c);
        $m!("U_c", u_c);
        $m!("b_c", b_c);
        $m!("W_out", w_out);
        $m!("b_out", b_out);
    };
}

impl DecoderWeights {
    pub fn zeros(d_e: usize, d_h: usize) -> Self {
        let m = DMatrix::zeros;
        let v = DVector::zeros;
        DecoderWeights {
            w_latent: m(d_h, d_e),
            b_latent: v(d_h),
            w_state: m(d_h, d_h),
            b_state: v(d_h),
            w_z: m(d_h, d_h),
            u_z: m(d_h, d_h),
            b_z: v(d_h),
            w_r: m(d_h, d_h),
            u_r: m(d_h, d_h),
            b_r: v(d_h),
            w_c: m(d_h, d_h),
            u_c: m(d_h, d_h),
            b_c: v(d_h),
            w_out: m(POSE_DIM, d_h),
            b_out: v(POSE_DIM),
        }
    }

    /// Every entry drawn uniformly from `[-scale, scale]`.
    pub fn uniform(d_e: usize, d_h: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = Self::zeros(d_e, d_h);
        w.for_each_slice_mut(|_, s| {
            for x in s {
                *x = rng.random_range(-scale..=scale);
            }
        });
        w
    }

    pub fn d_e(&self) -> usize {
        self.w_latent.ncols()
    }

    pub fn d_h(&self) -> usize {
        self.w_latent.nrows()
    }

    /// Visits each parameter's storage. Order is fixed; element order within
    /// a matrix is the storage order, not row-major.
    pub fn for_each_slice(&self, mut f: impl FnMut(&'static str, &[f64])) {
        macro_rules! visit {
            ($name:literal, $field:ident) => {
                f($name, self.$field.as_slice())
            };
        }
        for_each_param!(visit);
    }

    pub fn for_each_slice_mut(&mut self, mut f: impl FnMut(&'static str, &mut [f64])) {
        macro_rules! visit {
            ($name:literal, $field:ident) => {
                f($name, self.$field.as_mut_slice())
            };
        }
        for_each_param!(visit);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_slice(|_, s| n += s.len());
        n
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.for_each_slice(|_, s| out.extend_from_slice(s));
        out
    }

    /// Overwrites all entries from a vector laid out like [`Self::to_flat`].
    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count(), "flat parameter length");
        let mut offset = 0;
        self.for_each_slice_mut(|_, s| {
            s.copy_from_slice(&flat[offset..offset + s.len()]);
            offset += s.len();
        });
    }

    /// `self += alpha * other`, entrywise.
    pub fn axpy(&mut self, alpha: f64, other: &DecoderWeights) {
        let flat = other.to_flat();
        let mut offset = 0;
        self.for_each_slice_mut(|_, s| {
            for x in s.iter_mut() {
                *x += alpha * flat[offset];
                offset += 1;
            }
        });
    }

    /// Checks that all shapes agree with `W_latent` and every entry is finite.
    pub fn validate(&self) -> Result<(), DecoderError> {
        let d_h = self.d_h();
        let square = [
            ("W_state", &self.w_state),
            ("W_z", &self.w_z),
            ("U_z", &self.u_z),
            ("W_r", &self.w_r),
            ("U_r", &self.u_r),
            ("W_c", &self.w_c),
            ("U_c", &self.u_c),
        ];
        for (name, m) in square {
            if m.shape() != (d_h, d_h) {
                return Err(mismatch(
                    name,
                    format!("{d_h}x{d_h}"),
                    format!("{}x{}", m.nrows(), m.ncols()),
                ));
            }
        }
        if self.w_out.shape() != (POSE_DIM, d_h) {
            return Err(mismatch(
                "W_out",
                format!("{POSE_DIM}x{d_h}"),
                format!("{}x{}", self.w_out.nrows(), self.w_out.ncols()),
            ));
        }
        let biases = [
            ("b_latent", &self.b_latent, d_h),
            ("b_state", &self.b_state, d_h),
            ("b_z", &self.b_z, d_h),
            ("b_r", &self.b_r, d_h),
            ("b_c", &self.b_c, d_h),
            ("b_out", &self.b_out, POSE_DIM),
        ];
        for (name, b, n) in biases {
            if b.len() != n {
                return Err(mismatch(name, n, b.len()));
            }
        }
        let mut bad = None;
        self.for_each_slice(|name, s| {
            if bad.is_none() && s.iter().any(|x| !x.is_finite()) {
                bad = Some(name);
            }
        });
        match bad {
            Some(name) => Err(DecoderError::NonFinite(name.to_owned())),
            None => Ok(()),
        }
    }

    fn check_against(&self, cfg: &DecoderConfig) -> Result<(), DecoderError> {
        cfg.validate()?;
        self.validate()?;
        if self.d_e() != cfg.d_e {
            return Err(mismatch("d_e", cfg.d_e, self.d_e()));
        }
        if self.d_h() != cfg.d_h {
            return Err(mismatch("d_h", cfg.d_h, self.d_h()));
        }
        Ok(())
    }
}

/// One decoded pose state; every component lies strictly inside `(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TrajState(pub [f64; POSE_DIM]);

impl TrajState {
    pub fn distance(&self, other: &TrajState) -> f64 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Threshold,
    MaxSteps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<TrajState>,
    pub terminated_by: Termination,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn as_rows(&self) -> Vec<[f64; POSE_DIM]> {
        self.states.iter().map(|s| s.0).collect()
    }
}

/// Affine map from decoder states in `(0, 1)` to scene units:
/// `scene = offset + scale * state`, componentwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseScaling {
    pub offset: [f64; POSE_DIM],
    pub scale: [f64; POSE_DIM],
}

impl Default for PoseScaling {
    fn default() -> Self {
        PoseScaling {
            offset: [0.0; POSE_DIM],
            scale: [1.0; POSE_DIM],
        }
    }
}

impl PoseScaling {
    pub fn to_scene(&self, s: &TrajState) -> [f64; POSE_DIM] {
        std::array::from_fn(|i| self.offset[i] + self.scale[i] * s.0[i])
    }

    /// Inverse of [`Self::to_scene`]; `None` when a scale component is zero.
    pub fn to_state(&self, scene: &[f64; POSE_DIM]) -> Option<[f64; POSE_DIM]> {
        if self.scale.contains(&0.0) {
            return None;
        }
        Some(std::array::from_fn(|i| {
            (scene[i] - self.offset[i]) / self.scale[i]
        }))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn open_unit(x: f64) -> f64 {
    x.clamp(f64::MIN_POSITIVE, ONE_MINUS)
}

fn check_len(what: &str, v: &DVector<f64>, n: usize) -> Result<(), DecoderError> {
    if v.len() != n {
        return Err(mismatch(what, n, v.len()));
    }
    Ok(())
}

/// `h_0 = W_latent * h_tra + b_latent`.
pub fn latent_projection(
    h_tra: &DVector<f64>,
    w: &DecoderWeights,
) -> Result<DVector<f64>, DecoderError> {
    check_len("h_tra", h_tra, w.d_e())?;
    Ok(&w.w_latent * h_tra + &w.b_latent)
}

/// Gate activations of one GRU update, kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct GruStep {
    pub z: DVector<f64>,
    pub r: DVector<f64>,
    pub c: DVector<f64>,
    pub h: DVector<f64>,
}

pub(crate) fn gru_forward(f: &DVector<f64>, h_prev: &DVector<f64>, w: &DecoderWeights) -> GruStep {
    let z = (&w.w_z * f + &w.u_z * h_prev + &w.b_z).map(sigmoid);
    let r = (&w.w_r * f + &w.u_r * h_prev + &w.b_r).map(sigmoid);
    let rh = r.component_mul(h_prev);
    let c = (&w.w_c * f + &w.u_c * rh + &w.b_c).map(f64::tanh);
    let h = h_prev + z.component_mul(&(&c - h_prev));
    GruStep { z, r, c, h }
}

/// Standard GRU update with the reset gate inside the candidate's recurrent
/// term: `h = (1 - z) * h_prev + z * c`.
pub fn gru_step(
    f: &DVector<f64>,
    h_prev: &DVector<f64>,
    w: &DecoderWeights,
) -> Result<DVector<f64>, DecoderError> {
    check_len("f_t", f, w.d_h())?;
    check_len("h_prev", h_prev, w.d_h())?;
    Ok(gru_forward(f, h_prev, w).h)
}

/// Per-step values of an unrolled forward pass.
#[derive(Debug, Clone)]
pub(crate) struct Unrolled {
    pub h0: DVector<f64>,
    /// `(h_prev, f, gru, state)` per step.
    pub steps: Vec<(DVector<f64>, DVector<f64>, GruStep, TrajState)>,
    pub terminated_by: Termination,
}

impl Unrolled {
    pub fn trajectory(&self) -> Trajectory {
        Trajectory {
            states: self.steps.iter().map(|s| s.3).collect(),
            terminated_by: self.terminated_by,
        }
    }
}

pub(crate) enum StopRule {
    Threshold { max_steps: usize, threshold: f64 },
    Fixed(usize),
}

pub(crate) fn unroll(h_tra: &DVector<f64>, w: &DecoderWeights, rule: StopRule) -> Unrolled {
    let h0 = &w.w_latent * h_tra + &w.b_latent;
    let (max_steps, threshold) = match rule {
        StopRule::Threshold {
            max_steps,
            threshold,
        } => (max_steps, Some(threshold)),
        StopRule::Fixed(n) => (n, None),
    };
    let mut steps: Vec<(DVector<f64>, DVector<f64>, GruStep, TrajState)> =
        Vec::with_capacity(max_steps);
    let mut h_prev = h0.clone();
    let mut terminated_by = Termination::MaxSteps;
    for t in 1..=max_steps {
        let f = &w.w_state * &h_prev + &w.b_state;
        let g = gru_forward(&f, &h_prev, w);
        let o = &w.w_out * &g.h + &w.b_out;
        let state = TrajState(std::array::from_fn(|i| open_unit(sigmoid(o[i]))));
        let next = g.h.clone();
        let close = match (threshold, steps.last()) {
            (Some(p), Some(prev)) => state.distance(&prev.3) < p,
            _ => false,
        };
        steps.push((h_prev, f, g, state));
        h_prev = next;
        if close {
            terminated_by = Termination::Threshold;
            break;
        }
        if t == max_steps {
            terminated_by = Termination::MaxSteps;
        }
    }
    Unrolled {
        h0,
        steps,
        terminated_by,
    }
}

/// Unrolls the decoder until consecutive states are within the threshold
/// (checked from the second step on) or `max_steps` is reached.
pub fn decode(
    h_tra: &DVector<f64>,
    w: &DecoderWeights,
    cfg: &DecoderConfig,
) -> Result<Trajectory, DecoderError> {
    w.check_against(cfg)?;
    check_len("h_tra", h_tra, cfg.d_e)?;
    if h_tra.iter().any(|x| !x.is_finite()) {
        return Err(DecoderError::NonFinite("h_tra".into()));
    }
    let rule = StopRule::Threshold {
        max_steps: cfg.max_steps,
        threshold: cfg.threshold,
    };
    Ok(unroll(h_tra, w, rule).trajectory())
}

/// Unrolls exactly `steps` steps, ignoring the termination test.
pub fn decode_fixed(
    h_tra: &DVector<f64>,
    w: &DecoderWeights,
    steps: usize,
) -> Result<Vec<TrajState>, DecoderError> {
    w.validate()?;
    check_len("h_tra", h_tra, w.d_e())?;
    Ok(unroll(h_tra, w, StopRule::Fixed(steps))
        .steps
        .into_iter()
        .map(|s| s.3)
        .collect())
}

/// Trajectory regression loss.
///
/// Over the `k = min(len(pred), len(gt))` aligned steps this is the squared
/// error divided by `6k`. Each ground-truth step the prediction did not
/// reach adds the mean squared error of an all-0.5 state against it.
/// Predicted steps beyond the ground truth are not penalized.
pub fn mse_loss(pred: &[[f64; POSE_DIM]], gt: &[[f64; POSE_DIM]]) -> Result<f64, DecoderError> {
    if gt.is_empty() {
        return Err(DecoderError::EmptyGroundTruth);
    }
    let k = pred.len().min(gt.len());
    let aligned: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| p.iter().zip(g).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum();
    let mut loss = if k > 0 {
        aligned / (POSE_DIM * k) as f64
    } else {
        0.0
    };
    for g in &gt[k..] {
        loss += g.iter().map(|b| (0.5 - b).powi(2)).sum::<f64>() / POSE_DIM as f64;
    }
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_txt: f64,
    pub lambda_mse: f64,
}

impl LossWeights {
    /// Both weights must be non-negative and finite, and not both zero.
    pub fn new(lambda_txt: f64, lambda_mse: f64) -> Option<Self> {
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        (ok(lambda_txt) && ok(lambda_mse) && (lambda_txt > 0.0 || lambda_mse > 0.0)).then_some(
            LossWeights {
                lambda_txt,
                lambda_mse,
            },
        )
    }
}

/// `lambda_txt * l_txt + lambda_mse * l_mse`.
pub fn combined_loss(l_txt: f64, l_mse: f64, lw: LossWeights) -> f64 {
    lw.lambda_txt * l_txt + lw.lambda_mse * l_mse
}

/// Draws a uniformly random latent vector; used by tests and benches.
pub fn random_latent(d_e: usize, scale: f64, seed: u64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DVector::from_fn(d_e, |_, _| rng.random_range(-scale..=scale))
}
