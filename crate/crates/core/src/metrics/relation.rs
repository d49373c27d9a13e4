use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{check_threshold, iou, MetricsError};
use crate::grammar::NormBox;

/// `(subject category, relation, object category)`, stored case-folded and
/// trimmed.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "RawTriple")]
pub struct RelationTriple {
    subject: String,
    relation: String,
    object: String,
}

#[derive(Deserialize)]
struct RawTriple {
    subject: String,
    relation: String,
    object: String,
}

impl TryFrom<RawTriple> for RelationTriple {
    type Error = String;

    fn try_from(r: RawTriple) -> Result<Self, String> {
        RelationTriple::new(&r.subject, &r.relation, &r.object)
            .ok_or_else(|| "relation triple fields must be non-empty".to_owned())
    }
}

impl RelationTriple {
    /// `None` if any field is blank.
    pub fn new(subject: &str, relation: &str, object: &str) -> Option<Self> {
        let fold = |s: &str| {
            let t = s.trim().to_lowercase();
            (!t.is_empty()).then_some(t)
        };
        Some(RelationTriple {
            subject: fold(subject)?,
            relation: fold(relation)?,
            object: fold(object)?,
        })
    }

    pub fn subject(&self) -> &str {
        &self.subject
    }

    pub fn relation(&self) -> &str {
        &self.relation
    }

    pub fn object(&self) -> &str {
        &self.object
    }
}

impl fmt::Display for RelationTriple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.subject, self.relation, self.object)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrF1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub matched: usize,
    pub predicted: usize,
    pub ground_truth: usize,
}

impl PrF1 {
    /// Scores from match counts. Empty denominators give 0.
    pub fn from_counts(matched: usize, predicted: usize, ground_truth: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        PrF1 {
            precision: ratio(matched, predicted),
            recall: ratio(matched, ground_truth),
            // equal to 2PR/(P+R), with a single rounding
            f1: ratio(2 * matched, predicted + ground_truth),
            matched,
            predicted,
            ground_truth,
        }
    }
}

/// Size of the multiset intersection of `preds` and `gts`.
pub fn relation_matches(preds: &[RelationTriple], gts: &[RelationTriple]) -> usize {
    let mut left: HashMap<&RelationTriple, usize> = HashMap::new();
    for g in gts {
        *left.entry(g).or_default() += 1;
    }
    preds
        .iter()
        .filter(|p| match left.get_mut(p) {
            Some(n) if *n > 0 => {
                *n -= 1;
                true
            }
            _ => false,
        })
        .count()
}

pub fn relation_f1(preds: &[RelationTriple], gts: &[RelationTriple]) -> PrF1 {
    PrF1::from_counts(relation_matches(preds, gts), preds.len(), gts.len())
}

/// A triple together with the boxes of its two entities.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocatedTriple {
    #[serde(flatten)]
    pub triple: RelationTriple,
    pub subject_box: NormBox,
    pub object_box: NormBox,
}

/// Largest one-to-one matching where paired triples are equal and both
/// entity boxes overlap with IoU at least `iou_threshold`.
pub fn relation_matches_located(
    preds: &[LocatedTriple],
    gts: &[LocatedTriple],
    iou_threshold: f64,
) -> Result<usize, MetricsError> {
    check_threshold(iou_threshold)?;
    let adj: Vec<Vec<usize>> = preds
        .iter()
        .map(|p| {
            gts.iter()
                .enumerate()
                .filter(|(_, g)| {
                    p.triple == g.triple
                        && iou(&p.subject_box, &g.subject_box) >= iou_threshold
                        && iou(&p.object_box, &g.object_box) >= iou_threshold
                })
                .map(|(j, _)| j)
                .collect()
        })
        .collect();
    Ok(max_bipartite_matching(&adj, gts.len()))
}

pub fn relation_f1_located(
    preds: &[LocatedTriple],
    gts: &[LocatedTriple],
    iou_threshold: f64,
) -> Result<PrF1, MetricsError> {
    let m = relation_matches_located(preds, gts, iou_threshold)?;
    Ok(PrF1::from_counts(m, preds.len(), gts.len()))
}

// Augmenting paths (Kuhn). Inputs are per-image relation lists, so small.
fn max_bipartite_matching(adj: &[Vec<usize>], n_right: usize) -> usize {
    fn augment(
        u: usize,
        adj: &[Vec<usize>],
        seen: &mut [bool],
        owner: &mut [Option<usize>],
    ) -> bool {
        for &v in &adj[u] {
            if seen[v] {
                continue;
            }
            seen[v] = true;
            if owner[v].is_none_or(|w| augment(w, adj, seen, owner)) {
                owner[v] = Some(u);
                return true;
            }
        }
        false
    }
    let mut owner = vec![None; n_right];
    (0..adj.len())
        .filter(|&u| augment(u, adj, &mut vec![false; n_right], &mut owner))
        .count()
}
