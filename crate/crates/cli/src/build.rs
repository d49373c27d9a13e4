//! `rsvl build`: one JSON annotation per line in, instruction records out.

use std::collections::HashMap;
use std::io::Write;
use std::path::PathBuf;

use rayon::prelude::*;
use rsvl_core::builder::{
    self, caption_record_with, caption_text, validate_caption, BuildError, CaptionCheck,
    FixedScores, ImageAnnotation, ImageMeta, ObjectAnnotation, RelationAnnotation, SceneRecord,
    SimilarityGate, SimilarityScorer, SynonymTable,
};
use rsvl_core::{InstructionRecord, ModalityLabel, NormBox, Pos3, Pose6, TaskKind};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Status};
use crate::jsonl;
use crate::BuildArgs;

/// Detection, caption and classification input.
#[derive(Debug, Deserialize)]
struct ImageIn {
    image_id: String,
    #[serde(default)]
    modality: Option<ModalityLabel>,
    width: u32,
    height: u32,
    #[serde(default)]
    objects: Vec<ObjectAnnotation>,
    #[serde(default)]
    scene_label: Option<String>,
    /// Candidate captions; the rule-based caption is used when absent.
    #[serde(default)]
    captions: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct VqaIn {
    image_id: String,
    #[serde(default)]
    modality: Option<ModalityLabel>,
    question: String,
    answer: String,
    // carried for evaluation files built from the same source
    #[serde(default)]
    #[allow(dead_code)]
    question_type: Option<String>,
}

#[derive(Debug, Deserialize)]
struct RelationIn {
    image_id: String,
    #[serde(default)]
    modality: Option<ModalityLabel>,
    width: u32,
    height: u32,
    subject: ObjectAnnotation,
    object: ObjectAnnotation,
    relation: String,
}

#[derive(Debug, Deserialize)]
struct DecompositionIn {
    image_id: String,
    #[serde(default)]
    modality: Option<ModalityLabel>,
    width: u32,
    height: u32,
    region: NormBox,
    #[serde(default)]
    objects: Vec<ObjectAnnotation>,
    #[serde(default)]
    relations: Vec<RelationAnnotation>,
}

#[derive(Debug, Deserialize)]
struct SchedulingIn {
    image_id: String,
    #[serde(default)]
    modality: Option<ModalityLabel>,
    description: String,
    landmark_name: String,
    landmark_pos: Pos3,
    target_name: String,
    target_pos: Pos3,
    #[serde(default)]
    surroundings: Vec<String>,
    start_pose: Pose6,
    trajectory: Vec<Pose6>,
}

#[derive(Debug, Deserialize)]
struct DecisionIn {
    image_refs: Vec<String>,
    #[serde(default)]
    modality: Option<ModalityLabel>,
    start: Pose6,
    goal: Pose6,
    steps: Vec<String>,
}

#[derive(Debug, Serialize)]
struct Reject<'a> {
    record: usize,
    image_id: &'a str,
    caption: &'a str,
    failures: &'a [CaptionCheck],
}

struct CaptionGate {
    synonyms: SynonymTable,
    scores: Option<(FixedScores, f64)>,
}

/// Records built from one annotation line, plus rejected captions.
#[derive(Default)]
struct Built {
    records: Vec<InstructionRecord>,
    rejects: Vec<(String, String, Vec<CaptionCheck>)>,
    unknown: Vec<String>,
}

enum LineError {
    Schema(String),
    Build(BuildError),
}

fn image_annotation(a: ImageIn, default: ModalityLabel) -> (ImageAnnotation, Vec<String>) {
    let ann = ImageAnnotation {
        image_id: a.image_id,
        modality: a.modality.unwrap_or(default),
        width: a.width,
        height: a.height,
        objects: a.objects,
        scene_label: a.scene_label,
    };
    (ann, a.captions)
}

fn parse<T: serde::de::DeserializeOwned>(text: &str, built: &mut Built) -> Result<T, LineError> {
    let (v, unknown) = jsonl::parse_value(text).map_err(|e| LineError::Schema(e.to_string()))?;
    built.unknown = unknown;
    Ok(v)
}

fn build_captions(
    ann: &ImageAnnotation,
    candidates: Vec<String>,
    gate: Option<&CaptionGate>,
    built: &mut Built,
) -> Result<(), LineError> {
    let candidates = if candidates.is_empty() {
        vec![caption_text(ann).map_err(LineError::Build)?]
    } else {
        candidates
    };
    for cap in candidates {
        if let Some(g) = gate {
            let sim = match &g.scores {
                Some((scorer, bench)) => {
                    let score = scorer.score(&cap, &ann.image_id);
                    Some(SimilarityGate::new(score, *bench).ok_or_else(|| {
                        LineError::Schema(format!(
                            "no similarity score for image `{}`",
                            ann.image_id
                        ))
                    })?)
                }
                None => None,
            };
            let v = validate_caption(&cap, ann, &g.synonyms, sim);
            if !v.passed {
                built.rejects.push((ann.image_id.clone(), cap, v.failures));
                continue;
            }
        }
        built
            .records
            .push(caption_record_with(ann, &cap).map_err(LineError::Build)?);
    }
    Ok(())
}

fn build_line(
    text: &str,
    task: TaskKind,
    modality: ModalityLabel,
    gate: Option<&CaptionGate>,
) -> Result<Built, LineError> {
    let mut b = Built::default();
    let m = |x: Option<ModalityLabel>| x.unwrap_or(modality);
    let record = match task {
        TaskKind::Detection => {
            let (ann, _) = image_annotation(parse(text, &mut b)?, modality);
            builder::build_detection_record(&ann)
        }
        TaskKind::Classification => {
            let (ann, _) = image_annotation(parse(text, &mut b)?, modality);
            builder::build_classification_record(&ann)
        }
        TaskKind::Caption => {
            let (ann, candidates) = image_annotation(parse(text, &mut b)?, modality);
            build_captions(&ann, candidates, gate, &mut b)?;
            return Ok(b);
        }
        TaskKind::Vqa => {
            let a: VqaIn = parse(text, &mut b)?;
            builder::build_vqa_record(&a.question, &a.answer, &a.image_id, m(a.modality))
        }
        TaskKind::Relation => {
            let a: RelationIn = parse(text, &mut b)?;
            let meta = ImageMeta {
                image_id: a.image_id,
                modality: m(a.modality),
                width: a.width,
                height: a.height,
            };
            let rel = RelationAnnotation {
                subject: a.subject,
                object: a.object,
                relation: a.relation,
            };
            builder::build_relation_record(&rel, &meta)
        }
        TaskKind::Decomposition => {
            let a: DecompositionIn = parse(text, &mut b)?;
            let ann = ImageAnnotation {
                image_id: a.image_id,
                modality: m(a.modality),
                width: a.width,
                height: a.height,
                objects: a.objects,
                scene_label: None,
            };
            builder::build_decomposition_record(a.region, &ann, &a.relations)
        }
        TaskKind::Scheduling => {
            let a: SchedulingIn = parse(text, &mut b)?;
            let scene = SceneRecord {
                description: a.description,
                landmark_name: a.landmark_name,
                landmark_pos: a.landmark_pos,
                target_name: a.target_name,
                target_pos: a.target_pos,
                surroundings: a.surroundings,
                start_pose: a.start_pose,
                trajectory: a.trajectory,
            };
            builder::build_scheduling_record(&scene, &a.image_id, m(a.modality))
        }
        TaskKind::Decision => {
            let a: DecisionIn = parse(text, &mut b)?;
            builder::build_decision_record(&a.start, &a.goal, &a.steps, a.image_refs, m(a.modality))
        }
    };
    b.records.push(record.map_err(LineError::Build)?);
    Ok(b)
}

fn load_gate(
    args: &BuildArgs,
    err: &mut (dyn Write + Send),
) -> Result<Option<CaptionGate>, CliError> {
    if !args.validate_captions {
        if args.scores.is_some() {
            let _ = writeln!(
                err,
                "warning: --scores has no effect without --validate-captions"
            );
        }
        return Ok(None);
    }
    let synonyms = match &args.synonyms {
        Some(p) => {
            let (t, _): (SynonymTable, _) = jsonl::read_json(p)?;
            t
        }
        None => SynonymTable::new(),
    };
    let scores = match (&args.scores, args.benchmark) {
        (Some(p), Some(bench)) => {
            if !(bench.is_finite() && bench > 0.0) {
                return Err(CliError::format(format!(
                    "--benchmark must be positive, got {bench}"
                )));
            }
            let (table, _): (HashMap<String, f64>, _) = jsonl::read_json(p)?;
            if let Some((id, v)) = table.iter().find(|(_, v)| !v.is_finite()) {
                return Err(CliError::format(format!(
                    "{}: score for `{id}` is {v}",
                    p.display()
                )));
            }
            Some((
                FixedScores {
                    scores: table,
                    default: f64::NAN,
                },
                bench,
            ))
        }
        _ => None,
    };
    Ok(Some(CaptionGate { synonyms, scores }))
}

fn rejects_path(args: &BuildArgs) -> Option<PathBuf> {
    args.rejects.clone().or_else(|| {
        args.out.as_ref().map(|o| {
            let mut s = o.as_os_str().to_owned();
            s.push(".rejects.jsonl");
            PathBuf::from(s)
        })
    })
}

pub fn run(
    args: &BuildArgs,
    out: &mut (dyn Write + Send),
    err: &mut (dyn Write + Send),
) -> Result<Status, CliError> {
    let gate = load_gate(args, err)?;
    if args.validate_captions && args.task == TaskKind::Caption && rejects_path(args).is_none() {
        return Err(CliError::format(
            "--validate-captions writing to stdout needs --rejects",
        ));
    }
    let text = jsonl::read_text(&args.annotations)?;
    let lines = jsonl::lines(&text);
    let results: Vec<Result<Built, LineError>> = lines
        .par_iter()
        .map(|l| {
            build_line(
                l.text.trim_end_matches('\r'),
                args.task,
                args.modality,
                gate.as_ref(),
            )
        })
        .collect();

    let mut body = String::new();
    let mut rejects = String::new();
    for (index, (line, r)) in lines.iter().zip(results).enumerate() {
        let built = match r {
            Ok(b) => b,
            Err(LineError::Schema(msg)) => {
                return Err(CliError::format(format!(
                    "record {index} (line {}): {msg}",
                    line.number
                )))
            }
            Err(LineError::Build(e)) => {
                return Err(CliError::format(format!(
                    "record {index} (line {}): {e}",
                    line.number
                )))
            }
        };
        for key in &built.unknown {
            let _ = writeln!(err, "warning: record {index}: ignoring unknown key `{key}`");
        }
        for rec in &built.records {
            // builders already check this; a failure here is a bug
            rec.check().map_err(|e| {
                CliError::Internal(format!("record {index}: built an invalid record: {e}"))
            })?;
            body.push_str(
                &serde_json::to_string(rec).map_err(|e| CliError::Internal(e.to_string()))?,
            );
            body.push('\n');
        }
        for (image_id, caption, failures) in &built.rejects {
            let r = Reject {
                record: index,
                image_id,
                caption,
                failures,
            };
            rejects.push_str(
                &serde_json::to_string(&r).map_err(|e| CliError::Internal(e.to_string()))?,
            );
            rejects.push('\n');
        }
    }

    match &args.out {
        Some(p) => jsonl::write_file(p, body.as_bytes())?,
        None => out
            .write_all(body.as_bytes())
            .map_err(|e| CliError::io(std::path::Path::new("<stdout>"), e))?,
    }
    if args.validate_captions && args.task == TaskKind::Caption {
        let p = rejects_path(args).expect("checked above");
        jsonl::write_file(&p, rejects.as_bytes())?;
        let n = rejects.lines().count();
        if n > 0 {
            let _ = writeln!(err, "{n} captions rejected, see {}", p.display());
        }
    }
    Ok(Status::Ok)
}
