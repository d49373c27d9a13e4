//! `rsvl eval`: predictions and ground truth as JSONL, matched by `id`.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use rsvl_core::metrics::{
    accuracy, map_at, nav_metrics, relation_f1, relation_f1_located, rouge_l_multi, tokenize,
    typed_accuracy, BleuStats, DetPrediction, EvalReport, GroundTruthBox, LocatedTriple,
    NavEpisode, PrF1, RelationTriple, DEFAULT_IOU,
};
use rsvl_core::{NormBox, TaskKind};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::error::{CliError, Status};
use crate::jsonl;
use crate::EvalArgs;

#[derive(Debug, Deserialize)]
struct DetPred {
    id: String,
    #[serde(default)]
    detections: Vec<DetPrediction>,
}

#[derive(Debug, Deserialize)]
struct DetGt {
    id: String,
    #[serde(default)]
    objects: Vec<GroundTruthBox>,
}

#[derive(Debug, Deserialize)]
struct TripleIn {
    subject: String,
    relation: String,
    object: String,
    #[serde(default)]
    subject_box: Option<NormBox>,
    #[serde(default)]
    object_box: Option<NormBox>,
}

#[derive(Debug, Deserialize)]
struct RelIn {
    id: String,
    #[serde(default)]
    triples: Vec<TripleIn>,
}

#[derive(Debug, Deserialize)]
struct CaptionPred {
    id: String,
    caption: String,
}

#[derive(Debug, Deserialize)]
struct CaptionGt {
    id: String,
    references: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct LabelIn {
    id: String,
    label: String,
}

#[derive(Debug, Deserialize)]
struct VqaPred {
    id: String,
    answer: String,
}

#[derive(Debug, Deserialize)]
struct VqaGt {
    id: String,
    answer: String,
    question_type: String,
}

#[derive(Debug, Deserialize)]
struct NavPred {
    id: String,
    /// Waypoints as `[x, y, z]` or full poses; only the position is used.
    path: Vec<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
struct NavGt {
    id: String,
    goal: [f64; 3],
    shortest_path_length: f64,
}

trait Keyed {
    fn id(&self) -> &str;
}

macro_rules! keyed {
    ($($t:ty),*) => {$(impl Keyed for $t { fn id(&self) -> &str { &self.id } })*};
}
keyed!(
    DetPred,
    DetGt,
    RelIn,
    CaptionPred,
    CaptionGt,
    LabelIn,
    VqaPred,
    VqaGt,
    NavPred,
    NavGt
);

fn load<T: DeserializeOwned + Keyed + Send>(
    path: &Path,
    err: &mut (dyn Write + Send),
) -> Result<Vec<T>, CliError> {
    let text = jsonl::read_text(path)?;
    let lines = jsonl::lines(&text);
    let parsed: Vec<_> = lines
        .par_iter()
        .map(|l| jsonl::parse_value::<T>(l.text.trim_end_matches('\r')))
        .collect();
    let mut items = Vec::with_capacity(parsed.len());
    for (l, r) in lines.iter().zip(parsed) {
        let (item, unknown) =
            r.map_err(|e| CliError::format(format!("{}:{}: {e}", path.display(), l.number)))?;
        for key in unknown {
            let _ = writeln!(
                err,
                "warning: {}:{}: ignoring unknown key `{key}`",
                path.display(),
                l.number
            );
        }
        items.push(item);
    }
    Ok(items)
}

/// Pairs every ground-truth item with the prediction of the same id, in
/// ground-truth order. Both sides must hold the same set of unique ids.
fn pair<P: Keyed, G: Keyed>(preds: Vec<P>, gts: Vec<G>) -> Result<Vec<(P, G)>, CliError> {
    let mut by_id: HashMap<String, P> = HashMap::with_capacity(preds.len());
    for p in preds {
        let id = p.id().to_owned();
        if by_id.insert(id.clone(), p).is_some() {
            return Err(CliError::format(format!("duplicate prediction id `{id}`")));
        }
    }
    let mut seen = std::collections::HashSet::new();
    let mut pairs = Vec::with_capacity(gts.len());
    for g in gts {
        if !seen.insert(g.id().to_owned()) {
            return Err(CliError::format(format!(
                "duplicate ground-truth id `{}`",
                g.id()
            )));
        }
        let p = by_id
            .remove(g.id())
            .ok_or_else(|| CliError::format(format!("no prediction for id `{}`", g.id())))?;
        pairs.push((p, g));
    }
    if let Some(extra) = by_id.keys().min() {
        return Err(CliError::format(format!(
            "prediction id `{extra}` has no ground truth ({} unmatched)",
            by_id.len()
        )));
    }
    Ok(pairs)
}

fn metrics_error(e: rsvl_core::metrics::MetricsError) -> CliError {
    CliError::format(e.to_string())
}

fn located(items: &[TripleIn], side: &str, id: &str) -> Result<Vec<LocatedTriple>, CliError> {
    items
        .iter()
        .map(|t| {
            let triple = RelationTriple::new(&t.subject, &t.relation, &t.object)
                .ok_or_else(|| CliError::format(format!("{side} `{id}`: empty triple field")))?;
            match (t.subject_box, t.object_box) {
                (Some(subject_box), Some(object_box)) => Ok(LocatedTriple {
                    triple,
                    subject_box,
                    object_box,
                }),
                _ => Err(CliError::format(format!(
                    "{side} `{id}`: --iou needs subject_box and object_box on every triple"
                ))),
            }
        })
        .collect()
}

fn plain(items: &[TripleIn], side: &str, id: &str) -> Result<Vec<RelationTriple>, CliError> {
    items
        .iter()
        .map(|t| {
            RelationTriple::new(&t.subject, &t.relation, &t.object)
                .ok_or_else(|| CliError::format(format!("{side} `{id}`: empty triple field")))
        })
        .collect()
}

fn evaluate(args: &EvalArgs, err: &mut (dyn Write + Send)) -> Result<EvalReport, CliError> {
    let (p, g) = (&args.preds, &args.gts);
    match args.task {
        TaskKind::Detection => {
            let pairs = pair(load::<DetPred>(p, err)?, load::<DetGt>(g, err)?)?;
            let n = pairs.len();
            let (preds, gts): (Vec<_>, Vec<_>) = pairs
                .into_iter()
                .map(|(p, g)| (p.detections, g.objects))
                .unzip();
            let s = map_at(&preds, &gts, args.iou.unwrap_or(DEFAULT_IOU)).map_err(metrics_error)?;
            Ok(EvalReport::detection(&s, n))
        }
        TaskKind::Relation => {
            let pairs = pair(load::<RelIn>(p, err)?, load::<RelIn>(g, err)?)?;
            let per_image: Vec<PrF1> = pairs
                .iter()
                .map(|(p, g)| match args.iou {
                    Some(thr) => relation_f1_located(
                        &located(&p.triples, "prediction", &p.id)?,
                        &located(&g.triples, "ground truth", &g.id)?,
                        thr,
                    )
                    .map_err(metrics_error),
                    None => Ok(relation_f1(
                        &plain(&p.triples, "prediction", &p.id)?,
                        &plain(&g.triples, "ground truth", &g.id)?,
                    )),
                })
                .collect::<Result<_, _>>()?;
            let (m, np, ng) = per_image.iter().fold((0, 0, 0), |(a, b, c), s| {
                (a + s.matched, b + s.predicted, c + s.ground_truth)
            });
            Ok(EvalReport::relation(
                &PrF1::from_counts(m, np, ng),
                pairs.len(),
            ))
        }
        TaskKind::Caption => {
            let pairs = pair(load::<CaptionPred>(p, err)?, load::<CaptionGt>(g, err)?)?;
            if let Some((_, g)) = pairs.iter().find(|(_, g)| g.references.is_empty()) {
                return Err(CliError::format(format!(
                    "ground truth `{}` has no references",
                    g.id
                )));
            }
            let per: Vec<(BleuStats, f64)> = pairs
                .par_iter()
                .map(|(p, g)| {
                    let cand = tokenize(&p.caption);
                    let refs: Vec<Vec<String>> = g.references.iter().map(|r| tokenize(r)).collect();
                    (
                        BleuStats::sentence(&cand, &refs),
                        rouge_l_multi(&cand, &refs),
                    )
                })
                .collect();
            let mut stats = BleuStats::default();
            for (s, _) in &per {
                stats.merge(s);
            }
            let rouge = if per.is_empty() {
                0.0
            } else {
                per.iter().map(|x| x.1).sum::<f64>() / per.len() as f64
            };
            let bleu = std::array::from_fn(|i| stats.score(i + 1));
            Ok(EvalReport::caption(bleu, rouge, pairs.len()))
        }
        TaskKind::Classification => {
            let pairs = pair(load::<LabelIn>(p, err)?, load::<LabelIn>(g, err)?)?;
            let (preds, gts): (Vec<_>, Vec<_>) =
                pairs.into_iter().map(|(p, g)| (p.label, g.label)).unzip();
            let acc = accuracy(&preds, &gts).map_err(metrics_error)?;
            Ok(EvalReport::classification(acc, preds.len()))
        }
        TaskKind::Vqa => {
            let pairs = pair(load::<VqaPred>(p, err)?, load::<VqaGt>(g, err)?)?;
            let s = typed_accuracy(pairs.iter().map(|(p, g)| {
                (
                    g.question_type.as_str(),
                    p.answer.as_str(),
                    g.answer.as_str(),
                )
            }));
            Ok(EvalReport::vqa(&s, pairs.len()))
        }
        TaskKind::Scheduling | TaskKind::Decision => {
            let radius = args
                .success_radius
                .ok_or_else(|| CliError::format("navigation evaluation needs --success-radius"))?;
            let pairs = pair(load::<NavPred>(p, err)?, load::<NavGt>(g, err)?)?;
            let episodes = pairs
                .into_iter()
                .map(|(p, g)| {
                    let predicted_path = p
                        .path
                        .iter()
                        .map(|w| match w.len() {
                            3 | 6 => Ok([w[0], w[1], w[2]]),
                            n => Err(CliError::format(format!(
                                "prediction `{}`: waypoint has {n} values, expected 3 or 6",
                                p.id
                            ))),
                        })
                        .collect::<Result<_, _>>()?;
                    Ok(NavEpisode {
                        predicted_path,
                        goal: g.goal,
                        shortest_path_length: g.shortest_path_length,
                        success_radius: radius,
                    })
                })
                .collect::<Result<Vec<_>, CliError>>()?;
            let s = nav_metrics(&episodes).map_err(metrics_error)?;
            Ok(EvalReport::navigation(args.task, &s))
        }
        TaskKind::Decomposition => Err(CliError::format(
            "decomposition records have no evaluation; check them with `rsvl validate --strict`",
        )),
    }
}

pub fn run(
    args: &EvalArgs,
    out: &mut (dyn Write + Send),
    err: &mut (dyn Write + Send),
) -> Result<Status, CliError> {
    let report = evaluate(args, err)?;
    let text = if args.json {
        let mut s =
            serde_json::to_string_pretty(&report).map_err(|e| CliError::Internal(e.to_string()))?;
        s.push('\n');
        s
    } else {
        report.to_table()
    };
    out.write_all(text.as_bytes())
        .map_err(|e| CliError::io(Path::new("<stdout>"), e))?;
    Ok(Status::Ok)
}
