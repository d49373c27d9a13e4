use std::fmt::{self, Write as _};

use serde::ser::{SerializeMap, SerializeStruct};
use serde::{Serialize, Serializer};

use super::{DetectionScores, NavScores, PrF1, TypedAccuracy};
use crate::record::TaskKind;

/// Caption metrics that have a slot in the report but no implementation.
pub const UNSUPPORTED_CAPTION_METRICS: [&str; 3] = ["METEOR", "CIDEr", "SPICE"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Metric {
    Value(f64),
    Unsupported,
}

impl Serialize for Metric {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Metric::Value(v) => s.serialize_f64(*v),
            Metric::Unsupported => s.serialize_str("unsupported"),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Value(v) => write!(f, "{v:.2}"),
            Metric::Unsupported => f.write_str("unsupported"),
        }
    }
}

/// Metric bundle for one task. Rates are in percent; navigation error is in
/// scene units. Entries keep insertion order in JSON and in the table.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub task: TaskKind,
    pub metrics: Vec<(String, Metric)>,
    pub counts: Vec<(String, usize)>,
    /// Per-class (detection) or per-question-type (VQA) scores, in percent.
    pub breakdown: Vec<(String, f64)>,
}

struct Ordered<'a, V>(&'a [(String, V)]);

impl<V: Serialize> Serialize for Ordered<'_, V> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut m = s.serialize_map(Some(self.0.len()))?;
        for (k, v) in self.0 {
            m.serialize_entry(k, v)?;
        }
        m.end()
    }
}

impl Serialize for EvalReport {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut st = s.serialize_struct("EvalReport", 4)?;
        st.serialize_field("task", &self.task)?;
        st.serialize_field("metrics", &Ordered(&self.metrics))?;
        st.serialize_field("counts", &Ordered(&self.counts))?;
        st.serialize_field("breakdown", &Ordered(&self.breakdown))?;
        st.end()
    }
}

fn pct(x: f64) -> Metric {
    Metric::Value(100.0 * x)
}

fn owned<V>(items: impl IntoIterator<Item = (&'static str, V)>) -> Vec<(String, V)> {
    items.into_iter().map(|(k, v)| (k.to_owned(), v)).collect()
}

impl EvalReport {
    pub fn detection(s: &DetectionScores, images: usize) -> Self {
        let (mut gt, mut pred, mut tp) = (0, 0, 0);
        for c in s.per_class.values() {
            gt += c.gt_count;
            pred += c.pred_count;
            tp += c.true_positives;
        }
        EvalReport {
            task: TaskKind::Detection,
            metrics: owned([("mAP@50", pct(s.map))]),
            counts: owned([
                ("images", images),
                ("classes", s.per_class.len()),
                ("ground_truth", gt),
                ("predictions", pred),
                ("true_positives", tp),
            ]),
            breakdown: s
                .per_class
                .iter()
                .map(|(k, c)| (k.clone(), 100.0 * c.ap))
                .collect(),
        }
    }

    pub fn relation(s: &PrF1, images: usize) -> Self {
        EvalReport {
            task: TaskKind::Relation,
            metrics: owned([
                ("precision", pct(s.precision)),
                ("recall", pct(s.recall)),
                ("F1", pct(s.f1)),
            ]),
            counts: owned([
                ("images", images),
                ("predicted", s.predicted),
                ("ground_truth", s.ground_truth),
                ("matched", s.matched),
            ]),
            breakdown: Vec::new(),
        }
    }

    /// `bleu[i]` is BLEU-(i+1).
    pub fn caption(bleu: [f64; 4], rouge_l: f64, records: usize) -> Self {
        let mut metrics: Vec<(String, Metric)> = bleu
            .iter()
            .enumerate()
            .map(|(i, &b)| (format!("BLEU-{}", i + 1), pct(b)))
            .collect();
        metrics.push(("ROUGE-L".into(), pct(rouge_l)));
        for name in UNSUPPORTED_CAPTION_METRICS {
            metrics.push((name.into(), Metric::Unsupported));
        }
        EvalReport {
            task: TaskKind::Caption,
            metrics,
            counts: owned([("records", records)]),
            breakdown: Vec::new(),
        }
    }

    pub fn classification(acc: f64, records: usize) -> Self {
        EvalReport {
            task: TaskKind::Classification,
            metrics: owned([("Acc", pct(acc))]),
            counts: owned([("records", records)]),
            breakdown: Vec::new(),
        }
    }

    pub fn vqa(s: &TypedAccuracy, records: usize) -> Self {
        EvalReport {
            task: TaskKind::Vqa,
            metrics: owned([
                ("Avg. Acc", pct(s.macro_avg)),
                ("Overall Acc", pct(s.micro)),
            ]),
            counts: owned([("records", records), ("question_types", s.per_type.len())]),
            breakdown: s
                .per_type
                .iter()
                .map(|(k, (a, _))| (k.clone(), 100.0 * a))
                .collect(),
        }
    }

    pub fn navigation(task: TaskKind, s: &NavScores) -> Self {
        EvalReport {
            task,
            metrics: vec![
                ("NE".into(), Metric::Value(s.ne)),
                ("SR".into(), Metric::Value(s.sr)),
                ("OSR".into(), Metric::Value(s.osr)),
                ("SPL".into(), Metric::Value(s.spl)),
            ],
            counts: owned([("episodes", s.episodes)]),
            breakdown: Vec::new(),
        }
    }

    pub fn metric(&self, name: &str) -> Option<Metric> {
        self.metrics
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, v)| *v)
    }

    /// Plain-text rendering with names left-aligned and values right-aligned.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<(String, String)> = vec![("task".into(), self.task.as_str().into())];
        rows.extend(self.metrics.iter().map(|(k, v)| (k.clone(), v.to_string())));
        rows.extend(self.counts.iter().map(|(k, v)| (k.clone(), v.to_string())));
        let breakdown: Vec<(String, String)> = self
            .breakdown
            .iter()
            .map(|(k, v)| (format!("  {k}"), format!("{v:.2}")))
            .collect();
        let all = rows.iter().chain(&breakdown);
        let (kw, vw) = all.fold((0, 0), |(a, b), (k, v)| {
            (a.max(k.chars().count()), b.max(v.chars().count()))
        });
        let mut out = String::new();
        for (k, v) in &rows {
            let _ = writeln!(out, "{k:<kw$}  {v:>vw$}");
        }
        if !breakdown.is_empty() {
            let _ = writeln!(
                out,
                "{}",
                if self.task == TaskKind::Vqa {
                    "per question type"
                } else {
                    "per class"
                }
            );
            for (k, v) in &breakdown {
                let _ = writeln!(out, "{k:<kw$}  {v:>vw$}");
            }
        }
        out
    }
}
