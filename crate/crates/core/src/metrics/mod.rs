//! Evaluation metrics for the eight task formats.
//!
//! Core functions return fractions in `[0, 1]`; [`EvalReport`] converts rates
//! to percent, the scale used by published result tables. Navigation metrics
//! are already reported in percent (rates) and scene units (NE).

mod detection;
mod nav;
mod relation;
mod report;
mod text;

use thiserror::Error;

use crate::grammar::NormBox;

pub use detection::{
    average_precision, map50, map_at, ClassAp, DetPrediction, DetectionScores, GroundTruthBox,
    DEFAULT_IOU,
};
pub use nav::{episode_outcome, nav_metrics, EpisodeOutcome, NavEpisode, NavScores};
pub use relation::{
    relation_f1, relation_f1_located, relation_matches, relation_matches_located, LocatedTriple,
    PrF1, RelationTriple,
};
pub use report::{EvalReport, Metric, UNSUPPORTED_CAPTION_METRICS};
pub use text::{
    accuracy, bleu, lcs_len, normalize_answer, rouge_l, rouge_l_multi, tokenize, typed_accuracy,
    BleuStats, TypedAccuracy, MAX_BLEU_ORDER,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("length mismatch: {preds} predictions vs {gts} ground-truth items")]
    LengthMismatch { preds: usize, gts: usize },
    #[error("episode set is empty")]
    EmptyEpisodeSet,
    #[error("episode {index}: {reason}")]
    InvalidEpisode { index: usize, reason: String },
    #[error("prediction {index} of image {image}: confidence {value} is not in [0, 1]")]
    InvalidConfidence {
        image: usize,
        index: usize,
        value: f64,
    },
    #[error("IoU threshold {0} is not in [0, 1]")]
    InvalidThreshold(f64),
}

/// Overlap of two boxes treated as closed integer rectangles, so a box
/// `(x1, y1, x2, y2)` covers `(x2 - x1 + 1) * (y2 - y1 + 1)` cells.
pub fn iou(a: &NormBox, b: &NormBox) -> f64 {
    let area = |b: &NormBox| (u64::from(b.x2() - b.x1()) + 1) * (u64::from(b.y2() - b.y1()) + 1);
    let ix1 = a.x1().max(b.x1());
    let iy1 = a.y1().max(b.y1());
    let ix2 = a.x2().min(b.x2());
    let iy2 = a.y2().min(b.y2());
    let inter = if ix1 <= ix2 && iy1 <= iy2 {
        (u64::from(ix2 - ix1) + 1) * (u64::from(iy2 - iy1) + 1)
    } else {
        0
    };
    let union = area(a) + area(b) - inter;
    inter as f64 / union as f64
}

pub(crate) fn check_threshold(t: f64) -> Result<(), MetricsError> {
    if t.is_finite() && (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(MetricsError::InvalidThreshold(t))
    }
}

#[cfg(test)]
pub(crate) fn nb(x1: u16, y1: u16, x2: u16, y2: u16) -> NormBox {
    NormBox::new(x1, y1, x2, y2).expect("valid test box")
}
