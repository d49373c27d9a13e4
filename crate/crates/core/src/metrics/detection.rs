use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{check_threshold, iou, MetricsError};
use crate::grammar::NormBox;

pub const DEFAULT_IOU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetPrediction {
    pub category: String,
    pub bbox: NormBox,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub category: String,
    pub bbox: NormBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassAp {
    pub ap: f64,
    pub gt_count: usize,
    pub pred_count: usize,
    pub true_positives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectionScores {
    /// Only categories that occur in the ground truth.
    pub per_class: BTreeMap<String, ClassAp>,
    /// Mean AP over `per_class`; 0 when there is no ground truth at all.
    pub map: f64,
}

/// mAP at IoU 0.5. `preds[i]` and `gts[i]` describe the same image.
pub fn map50(
    preds: &[Vec<DetPrediction>],
    gts: &[Vec<GroundTruthBox>],
) -> Result<DetectionScores, MetricsError> {
    map_at(preds, gts, DEFAULT_IOU)
}

pub fn map_at(
    preds: &[Vec<DetPrediction>],
    gts: &[Vec<GroundTruthBox>],
    iou_threshold: f64,
) -> Result<DetectionScores, MetricsError> {
    if preds.len() != gts.len() {
        return Err(MetricsError::LengthMismatch {
            preds: preds.len(),
            gts: gts.len(),
        });
    }
    check_threshold(iou_threshold)?;
    for (image, img) in preds.iter().enumerate() {
        for (index, p) in img.iter().enumerate() {
            if !(p.confidence.is_finite() && (0.0..=1.0).contains(&p.confidence)) {
                return Err(MetricsError::InvalidConfidence {
                    image,
                    index,
                    value: p.confidence,
                });
            }
        }
    }

    let classes: BTreeSet<&str> = gts.iter().flatten().map(|g| g.category.as_str()).collect();
    let per_class: BTreeMap<String, ClassAp> = classes
        .into_iter()
        .map(|c| (c.to_owned(), class_ap(preds, gts, c, iou_threshold)))
        .collect();
    let map = if per_class.is_empty() {
        0.0
    } else {
        per_class.values().map(|c| c.ap).sum::<f64>() / per_class.len() as f64
    };
    Ok(DetectionScores { per_class, map })
}

fn class_ap(
    preds: &[Vec<DetPrediction>],
    gts: &[Vec<GroundTruthBox>],
    category: &str,
    thr: f64,
) -> ClassAp {
    let mut ranked: Vec<(usize, &DetPrediction)> = preds
        .iter()
        .enumerate()
        .flat_map(|(i, img)| {
            img.iter()
                .filter(|p| p.category == category)
                .map(move |p| (i, p))
        })
        .collect();
    // sort_by is stable: equal confidences keep input order
    ranked.sort_by(|a, b| b.1.confidence.total_cmp(&a.1.confidence));

    let gt_boxes: Vec<Vec<NormBox>> = gts
        .iter()
        .map(|img| {
            img.iter()
                .filter(|g| g.category == category)
                .map(|g| g.bbox)
                .collect()
        })
        .collect();
    let gt_count = gt_boxes.iter().map(Vec::len).sum();
    let mut used: Vec<Vec<bool>> = gt_boxes.iter().map(|b| vec![false; b.len()]).collect();

    let hits: Vec<bool> = ranked
        .iter()
        .map(|&(img, p)| {
            let mut best: Option<(usize, f64)> = None;
            for (k, g) in gt_boxes[img].iter().enumerate() {
                if used[img][k] {
                    continue;
                }
                let o = iou(&p.bbox, g);
                if o >= thr && best.is_none_or(|(_, b)| o > b) {
                    best = Some((k, o));
                }
            }
            match best {
                Some((k, _)) => {
                    used[img][k] = true;
                    true
                }
                None => false,
            }
        })
        .collect();

    ClassAp {
        ap: average_precision(&hits, gt_count),
        gt_count,
        pred_count: ranked.len(),
        true_positives: hits.iter().filter(|&&h| h).count(),
    }
}

/// All-points interpolated AP of a ranked list of match outcomes: the area
/// under the precision envelope `p(r) = max precision at recall >= r`.
pub fn average_precision(hits: &[bool], gt_count: usize) -> f64 {
    if gt_count == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(hits.len());
    let mut precision = Vec::with_capacity(hits.len());
    for (i, &h) in hits.iter().enumerate() {
        tp += usize::from(h);
        recall.push(tp as f64 / gt_count as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev) * p;
        prev = *r;
    }
    ap
}
