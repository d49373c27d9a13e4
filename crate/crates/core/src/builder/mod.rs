//! Deterministic construction of the eight instruction record formats from
//! source annotations.

pub mod caption;
pub mod tiling;

use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::{
    self, join_tuples, normalize_box, BoxError, MarkupNode, ModalityLabel, NormBox, PixelRect,
    Pos3, Pose6, TaskTag,
};
use crate::record::{InstructionRecord, TaskKind};

pub use caption::{
    extract_claims, validate_caption, CaptionCheck, FixedScores, SimilarityGate, SimilarityScorer,
    SynonymTable, ValidationResult, CAPTION_PROMPT,
};
pub use tiling::{plan_tiling, InvalidExtent, TilingPlan, MAX_TILES, TILE_SIZE};

pub const DETECTION_PROMPT: &str =
    "Detect all objects shown in the remote sensing image and describe using HBBs.";
pub const CLASSIFICATION_PROMPT: &str = "Please output the scene corresponding to the image:";
pub const VQA_SUFFIX: &str = "The answer to this question is";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BuildError {
    #[error("annotation has no objects")]
    EmptyAnnotation,
    #[error("label is empty")]
    EmptyLabel,
    #[error("no steps given")]
    EmptySteps,
    #[error("{what}: {source}")]
    Box {
        what: String,
        #[source]
        source: BoxError,
    },
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
}

/// One annotated object in pixel coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectAnnotation {
    pub category: String,
    #[serde(rename = "bbox")]
    pub px_box: PixelRect,
    #[serde(default, rename = "shape", skip_serializing_if = "Option::is_none")]
    pub shape_attr: Option<String>,
}

/// Identity and extent of a source image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub image_id: String,
    pub modality: ModalityLabel,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageAnnotation {
    pub image_id: String,
    pub modality: ModalityLabel,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub objects: Vec<ObjectAnnotation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene_label: Option<String>,
}

impl ImageAnnotation {
    pub fn meta(&self) -> ImageMeta {
        ImageMeta {
            image_id: self.image_id.clone(),
            modality: self.modality,
            width: self.width,
            height: self.height,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationAnnotation {
    pub subject: ObjectAnnotation,
    pub object: ObjectAnnotation,
    pub relation: String,
}

/// Source data for one aerial navigation sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub description: String,
    pub landmark_name: String,
    pub landmark_pos: Pos3,
    pub target_name: String,
    pub target_pos: Pos3,
    #[serde(default)]
    pub surroundings: Vec<String>,
    pub start_pose: Pose6,
    pub trajectory: Vec<Pose6>,
}

/// Coarse position of a region inside the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction9 {
    UpperLeft,
    Upper,
    UpperRight,
    Left,
    Center,
    Right,
    LowerLeft,
    Lower,
    LowerRight,
}

impl Direction9 {
    pub const ALL: [Direction9; 9] = [
        Direction9::UpperLeft,
        Direction9::Upper,
        Direction9::UpperRight,
        Direction9::Left,
        Direction9::Center,
        Direction9::Right,
        Direction9::LowerLeft,
        Direction9::Lower,
        Direction9::LowerRight,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Direction9::UpperLeft => "upper left",
            Direction9::Upper => "upper",
            Direction9::UpperRight => "upper right",
            Direction9::Left => "left",
            Direction9::Center => "center",
            Direction9::Right => "right",
            Direction9::LowerLeft => "lower left",
            Direction9::Lower => "lower",
            Direction9::LowerRight => "lower right",
        }
    }
}

impl fmt::Display for Direction9 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

// Grid lines at 333 and 666, compared on doubled centers.
fn third(c2: u32) -> usize {
    if c2 < 666 {
        0
    } else if c2 < 1332 {
        1
    } else {
        2
    }
}

/// Classifies the box center into a 3x3 grid over the normalized image.
pub fn region_direction(b: &NormBox) -> Direction9 {
    let (cx2, cy2) = b.center2();
    Direction9::ALL[third(cy2) * 3 + third(cx2)]
}

fn free_text<'a>(s: &'a str, what: &str) -> Result<&'a str, BuildError> {
    if grammar::is_free_text(s) {
        Ok(s)
    } else {
        Err(BuildError::InvariantViolation(format!(
            "{what} contains a `<|` sequence"
        )))
    }
}

fn name<'a>(s: &'a str, what: &str) -> Result<&'a str, BuildError> {
    if s.trim().is_empty() {
        return Err(BuildError::InvariantViolation(format!("{what} is empty")));
    }
    free_text(s, what)
}

fn sentence(s: &str) -> String {
    let t = s.trim();
    let t = t.strip_suffix('.').unwrap_or(t);
    format!("{t}.")
}

fn norm(px: PixelRect, width: u32, height: u32, what: &str) -> Result<NormBox, BuildError> {
    normalize_box(px, width, height).map_err(|source| BuildError::Box {
        what: what.to_owned(),
        source,
    })
}

fn ref_det(category: &str, boxes: &[NormBox]) -> String {
    format!(
        "<|ref|>{category}<|/ref|><|det|>{}<|/det|>",
        join_tuples(boxes)
    )
}

fn finish(
    image_refs: Vec<String>,
    modality: ModalityLabel,
    task: TaskKind,
    prompt: String,
    response: String,
) -> Result<InstructionRecord, BuildError> {
    let record = InstructionRecord {
        image_refs,
        modality,
        task,
        prompt,
        response,
    };
    record
        .check()
        .map_err(|e| BuildError::InvariantViolation(e.to_string()))?;
    Ok(record)
}

/// Groups normalized boxes by category, categories in first-appearance order.
fn group_boxes<'a>(
    objects: impl IntoIterator<Item = (&'a str, NormBox)>,
) -> Vec<(&'a str, Vec<NormBox>)> {
    let mut groups: Vec<(&str, Vec<NormBox>)> = Vec::new();
    for (cat, b) in objects {
        match groups.iter_mut().find(|g| g.0 == cat) {
            Some(g) => g.1.push(b),
            None => groups.push((cat, vec![b])),
        }
    }
    groups
}

fn normalized_objects(ann: &ImageAnnotation) -> Result<Vec<(&str, NormBox)>, BuildError> {
    ann.objects
        .iter()
        .enumerate()
        .map(|(i, o)| {
            let cat = name(&o.category, &format!("object {i} category"))?;
            let b = norm(o.px_box, ann.width, ann.height, &format!("object {i}"))?;
            Ok((cat, b))
        })
        .collect()
}

pub fn build_detection_record(ann: &ImageAnnotation) -> Result<InstructionRecord, BuildError> {
    if ann.objects.is_empty() {
        return Err(BuildError::EmptyAnnotation);
    }
    let objects = normalized_objects(ann)?;
    let total = objects.len();
    let spans: Vec<String> = group_boxes(objects)
        .iter()
        .map(|(cat, boxes)| format!("{} {}", boxes.len(), ref_det(cat, boxes)))
        .collect();
    let verb = if total == 1 { "is" } else { "are" };
    let response = format!("There {verb} {} in the image.", spans.join(", "));
    finish(
        vec![ann.image_id.clone()],
        ann.modality,
        TaskKind::Detection,
        DETECTION_PROMPT.to_owned(),
        response,
    )
}

/// Rule-based caption text for an annotation.
pub fn caption_text(ann: &ImageAnnotation) -> Result<String, BuildError> {
    if ann.objects.is_empty() {
        return match &ann.scene_label {
            Some(label) if label.trim().is_empty() => Err(BuildError::EmptyLabel),
            Some(label) => Ok(caption::scene_sentence(free_text(
                label.trim(),
                "scene label",
            )?)),
            None => Err(BuildError::EmptyAnnotation),
        };
    }
    let mut sentences = Vec::new();
    for (i, o) in ann.objects.iter().enumerate() {
        name(&o.category, &format!("object {i} category"))?;
        if let Some(s) = &o.shape_attr {
            name(s, &format!("object {i} shape"))?;
        }
    }
    for (cat, shape, count) in caption::attribute_groups(&ann.objects) {
        sentences.push(caption::object_sentence(count, cat, shape));
    }
    Ok(sentences.join(" "))
}

/// Caption record with an explicit response text.
pub fn caption_record_with(
    ann: &ImageAnnotation,
    caption: &str,
) -> Result<InstructionRecord, BuildError> {
    finish(
        vec![ann.image_id.clone()],
        ann.modality,
        TaskKind::Caption,
        CAPTION_PROMPT.to_owned(),
        free_text(caption, "caption")?.to_owned(),
    )
}

pub fn build_caption_record(ann: &ImageAnnotation) -> Result<InstructionRecord, BuildError> {
    let text = caption_text(ann)?;
    caption_record_with(ann, &text)
}

pub fn build_classification_record(ann: &ImageAnnotation) -> Result<InstructionRecord, BuildError> {
    let label = ann.scene_label.as_deref().unwrap_or("");
    if label.trim().is_empty() {
        return Err(BuildError::EmptyLabel);
    }
    finish(
        vec![ann.image_id.clone()],
        ann.modality,
        TaskKind::Classification,
        CLASSIFICATION_PROMPT.to_owned(),
        sentence(free_text(label, "scene label")?),
    )
}

pub fn build_vqa_record(
    question: &str,
    answer: &str,
    image_id: &str,
    modality: ModalityLabel,
) -> Result<InstructionRecord, BuildError> {
    let q = question.trim();
    if q.is_empty() || answer.trim().is_empty() {
        return Err(BuildError::EmptyLabel);
    }
    let prompt = if q.ends_with(VQA_SUFFIX) {
        q.to_owned()
    } else {
        format!("{q} {VQA_SUFFIX}")
    };
    finish(
        vec![image_id.to_owned()],
        modality,
        TaskKind::Vqa,
        free_text(&prompt, "question")?.to_owned(),
        sentence(free_text(answer, "answer")?),
    )
}

pub fn build_relation_record(
    rel: &RelationAnnotation,
    img: &ImageMeta,
) -> Result<InstructionRecord, BuildError> {
    let subject = name(&rel.subject.category, "subject category")?;
    let object = name(&rel.object.category, "object category")?;
    let relation = name(&rel.relation, "relation")?;
    let sb = norm(rel.subject.px_box, img.width, img.height, "subject")?;
    let ob = norm(rel.object.px_box, img.width, img.height, "object")?;
    let prompt = format!(
        "{}What is the relationship between {} and the object in <|det|>{}<|/det|> in the image? And output their categories.",
        TaskTag::Reasoning.token(),
        ref_det(subject, &[sb]),
        join_tuples(&[ob]),
    );
    let response = format!(
        "subject: {subject}, object: {object}, the {subject} is <|rel|>{relation}<|/rel|> the {object}."
    );
    finish(
        vec![img.image_id.clone()],
        img.modality,
        TaskKind::Relation,
        prompt,
        response,
    )
}

/// Builds the four-step region analysis record. Objects and relations are
/// restricted to those whose box centers fall inside `region`.
pub fn build_decomposition_record(
    region: NormBox,
    ann: &ImageAnnotation,
    rels: &[RelationAnnotation],
) -> Result<InstructionRecord, BuildError> {
    let inside = |b: &NormBox| region.contains_point2(b.center2());
    let objects: Vec<_> = normalized_objects(ann)?
        .into_iter()
        .filter(|(_, b)| inside(b))
        .collect();
    let groups = group_boxes(objects.iter().copied());

    let mut clauses = Vec::new();
    for (i, r) in rels.iter().enumerate() {
        let s = name(&r.subject.category, &format!("relation {i} subject"))?;
        let o = name(&r.object.category, &format!("relation {i} object"))?;
        let label = name(&r.relation, &format!("relation {i} label"))?;
        let sb = norm(
            r.subject.px_box,
            ann.width,
            ann.height,
            &format!("relation {i} subject"),
        )?;
        let ob = norm(
            r.object.px_box,
            ann.width,
            ann.height,
            &format!("relation {i} object"),
        )?;
        if inside(&sb) && inside(&ob) {
            clauses.push(format!(
                "{} is <|rel|>{label}<|/rel|> the {}",
                ref_det(s, &[sb]),
                ref_det(o, &[ob])
            ));
        }
    }

    let step1 = format!(
        "Step1: Locate the target area: The target area locates at the {} of the image.",
        region_direction(&region)
    );
    let step2 = if objects.is_empty() {
        "Step2: Perform object detection: There are 0 entities in the target area.".to_owned()
    } else {
        let spans: Vec<String> = groups
            .iter()
            .map(|(cat, boxes)| format!("{} {}", boxes.len(), ref_det(cat, boxes)))
            .collect();
        format!(
            "Step2: Perform object detection: There are {} entities in the target area, including: {}.",
            objects.len(),
            spans.join(", ")
        )
    };
    let step3 = if clauses.is_empty() {
        "Step3: Perform relation analysis: There are 0 relations found.".to_owned()
    } else {
        format!(
            "Step3: Perform relation analysis: There are {} relations found: {}.",
            clauses.len(),
            clauses.join("; ")
        )
    };
    let step4 = format!(
        "Step4: Perform context summary: {} object types with {} interactions.",
        groups.len(),
        clauses.len()
    );
    let prompt = format!(
        "{}Analyze the region <|det|>{}<|/det|> of the image.",
        TaskTag::Decomposition.token(),
        join_tuples(&[region])
    );
    finish(
        vec![ann.image_id.clone()],
        ann.modality,
        TaskKind::Decomposition,
        prompt,
        [step1, step2, step3, step4].join("\n"),
    )
}

pub fn build_scheduling_record(
    scene: &SceneRecord,
    image_id: &str,
    modality: ModalityLabel,
) -> Result<InstructionRecord, BuildError> {
    let first = scene
        .trajectory
        .first()
        .ok_or_else(|| BuildError::InvariantViolation("trajectory is empty".into()))?;
    if first.values() != scene.start_pose.values() {
        return Err(BuildError::InvariantViolation(
            "trajectory does not start at the start pose".into(),
        ));
    }
    let description = name(&scene.description, "description")?.trim();
    let description = description.strip_suffix('.').unwrap_or(description);
    let landmark = name(&scene.landmark_name, "landmark name")?;
    let target = name(&scene.target_name, "target name")?;
    let surroundings = if scene.surroundings.is_empty() {
        "none".to_owned()
    } else {
        for s in &scene.surroundings {
            name(s, "surrounding")?;
        }
        scene.surroundings.join(", ")
    };

    let prompt = format!(
        "{}You need to formulate a flight plan for a quadcopter based on this map, enabling it to fly over all the buildings and reach the destination. \
The target location is described as follows: {description}. \
The 3D coordinates of the landmark are as follows: <|ref|>{landmark}<|/ref|><|pos|>{}<|/pos|>. \
Your starting 3D coordinates and orientation angles are <|pose|>{}<|/pose|>. \
You need to provide a series of 3D waypoints and attitude angles for the quadcopter to reach the target location.",
        TaskTag::Navigation.token(),
        scene.landmark_pos,
        join_tuples(std::slice::from_ref(&scene.start_pose)),
    );
    let response = [
        format!(
            "Step 1: Extract basic information as follows: Target: {target}. Landmarks: {landmark}. Surroundings: {surroundings}."
        ),
        format!(
            "Step 2: Get landmarks position: <|ref|>{landmark}<|/ref|><|pos|>{}<|/pos|>.",
            scene.landmark_pos
        ),
        format!(
            "Step 3: Get target position: <|ref|>{target}<|/ref|><|pos|>{}<|/pos|>.",
            scene.target_pos
        ),
        format!(
            "Step 4: Trajectory: <|pose|>{}<|/pose|>.",
            join_tuples(&scene.trajectory)
        ),
    ]
    .join("\n");
    finish(
        vec![image_id.to_owned()],
        modality,
        TaskKind::Scheduling,
        prompt,
        response,
    )
}

pub fn build_decision_record(
    start: &Pose6,
    goal: &Pose6,
    steps: &[String],
    image_refs: Vec<String>,
    modality: ModalityLabel,
) -> Result<InstructionRecord, BuildError> {
    if steps.is_empty() {
        return Err(BuildError::EmptySteps);
    }
    let lines = steps
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let s = name(s, &format!("step {}", i + 1))?;
            Ok(format!("Step{}: {}", i + 1, sentence(s)))
        })
        .collect::<Result<Vec<_>, BuildError>>()?;
    let prompt = format!(
        "{}How to fly from position <|pose|>{}<|/pose|> to position <|pose|>{}<|/pose|>, and provide a detailed plan.",
        TaskTag::Decision.token(),
        join_tuples(std::slice::from_ref(start)),
        join_tuples(std::slice::from_ref(goal)),
    );
    finish(
        image_refs,
        modality,
        TaskKind::Decision,
        prompt,
        lines.join("\n"),
    )
}

/// Counts recovered from a decomposition response.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecompositionCounts {
    pub entities: usize,
    pub object_types: usize,
    pub relations: usize,
}

fn leading_count_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(\d+) $").expect("valid regex"))
}

fn step_marker_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"Step([1-4]):").expect("valid regex"))
}

fn stated(text: &str, re: &str) -> Result<usize, String> {
    let re = Regex::new(re).expect("valid regex");
    re.captures(text)
        .and_then(|c| c[1].parse().ok())
        .ok_or_else(|| format!("missing `{}`", re.as_str()))
}

/// Re-parses a decomposition response and checks that every stated count
/// agrees with the spans it describes.
pub fn check_decomposition(response: &str) -> Result<DecompositionCounts, String> {
    let doc = grammar::parse(response).map_err(|e| e.to_string())?;
    let mut step = 0usize;
    let mut texts: [String; 5] = Default::default();
    let mut step2_groups: Vec<(String, usize, usize)> = Vec::new();
    let mut rel_count = 0usize;
    let mut last_text = String::new();
    let mut pending: Option<(String, usize)> = None;

    for node in &doc.nodes {
        match node {
            MarkupNode::Text(t) => {
                let mut cursor = 0;
                for m in step_marker_re().captures_iter(t) {
                    let whole = m.get(0).expect("match");
                    texts[step].push_str(&t[cursor..whole.start()]);
                    let k: usize = m[1].parse().expect("single digit");
                    if k != step + 1 {
                        return Err(format!("Step{k} appears out of order"));
                    }
                    step = k;
                    cursor = whole.start();
                }
                texts[step].push_str(&t[cursor..]);
                last_text = t.clone();
            }
            MarkupNode::Ref(name) if step == 2 => {
                let n = leading_count_re()
                    .captures(&last_text)
                    .and_then(|c| c[1].parse().ok())
                    .ok_or_else(|| format!("no count before <|ref|>{name}<|/ref|>"))?;
                pending = Some((name.clone(), n));
            }
            MarkupNode::Det(boxes) if step == 2 => {
                let (name, n) = pending
                    .take()
                    .ok_or_else(|| "Step2 box list without a category".to_owned())?;
                step2_groups.push((name, n, boxes.len()));
            }
            MarkupNode::Rel(_) if step == 3 => rel_count += 1,
            MarkupNode::Rel(_) => return Err("relation outside Step3".into()),
            _ => {}
        }
    }
    if step != 4 {
        return Err(format!("response stops at Step{step}"));
    }

    let entities = stated(&texts[2], r"There are (\d+) entities")?;
    let relations = stated(&texts[3], r"There are (\d+) relations")?;
    let types = stated(&texts[4], r"(\d+) object types")?;
    let interactions = stated(&texts[4], r"with (\d+) interactions")?;

    for (name, n, boxes) in &step2_groups {
        if n != boxes {
            return Err(format!("{name}: stated {n} but lists {boxes} boxes"));
        }
    }
    let listed: usize = step2_groups.iter().map(|g| g.1).sum();
    if listed != entities {
        return Err(format!(
            "Step2 states {entities} entities but lists {listed}"
        ));
    }
    let mut names: Vec<&str> = step2_groups.iter().map(|g| g.0.as_str()).collect();
    names.sort_unstable();
    names.dedup();
    if names.len() != types {
        return Err(format!(
            "Step4 states {types} object types but Step2 lists {}",
            names.len()
        ));
    }
    if relations != rel_count || interactions != rel_count {
        return Err(format!(
            "Step3 lists {rel_count} relations; stated {relations} in Step3 and {interactions} in Step4"
        ));
    }
    Ok(DecompositionCounts {
        entities,
        object_types: types,
        relations: rel_count,
    })
}


#[cfg(test)]
mod tests {
    use super::test_support::{image, obj};
    use super::*;

    fn pose(v: [f64; 6]) -> Pose6 {
        Pose6::from_f64(v).unwrap()
    }

    #[test]
    fn detection_single_ship() {
        let ann = image(1000, 1000, vec![obj("ship", [0, 0, 100, 100], None)]);
        let r = build_detection_record(&ann).unwrap();
        assert_eq!(r.prompt, DETECTION_PROMPT);
        assert_eq!(
            r.response,
            "There is 1 <|ref|>ship<|/ref|><|det|>[[0,0,100,100]]<|/det|> in the image."
        );
    }

    #[test]
    fn detection_groups_by_first_appearance() {
        let ann = image(
            800,
            800,
            vec![
                obj("plane", [0, 0, 80, 80], None),
                obj("ship", [400, 400, 800, 800], None),
                obj("plane", [8, 8, 16, 16], None),
            ],
        );
        let r = build_detection_record(&ann).unwrap();
        assert_eq!(
            r.response,
            "There are 2 <|ref|>plane<|/ref|><|det|>[[0,0,100,100], [10,10,20,20]]<|/det|>, \
1 <|ref|>ship<|/ref|><|det|>[[500,500,999,999]]<|/det|> in the image."
        );
    }

    #[test]
    fn detection_errors() {
        assert_eq!(
            build_detection_record(&image(10, 10, vec![])),
            Err(BuildError::EmptyAnnotation)
        );
        let bad = image(10, 10, vec![obj("ship", [5, 0, 1, 1], None)]);
        assert!(matches!(
            build_detection_record(&bad),
            Err(BuildError::Box {
                source: BoxError::InvertedBox,
                ..
            })
        ));
        let smuggled = image(10, 10, vec![obj("ship<|det|>", [0, 0, 1, 1], None)]);
        assert!(matches!(
            build_detection_record(&smuggled),
            Err(BuildError::InvariantViolation(_))
        ));
    }

    #[test]
    fn captions() {
        let ann = image(
            800,
            800,
            vec![
                obj("aircraft", [0, 0, 10, 10], Some("small")),
                obj("aircraft", [20, 20, 30, 30], Some("small")),
            ],
        );
        let r = build_caption_record(&ann).unwrap();
        assert_eq!(r.prompt, CAPTION_PROMPT);
        assert_eq!(
            r.response,
            "There are 2 aircrafts in the image, which are small in size."
        );
        let ship = image(800, 800, vec![obj("ship", [0, 0, 10, 10], None)]);
        assert_eq!(
            build_caption_record(&ship).unwrap().response,
            "There is 1 ship in the image."
        );
        let mut harbor = image(800, 800, vec![]);
        harbor.scene_label = Some("harbor".into());
        assert_eq!(
            build_caption_record(&harbor).unwrap().response,
            "The image shows a harbor scene."
        );
        assert_eq!(
            build_caption_record(&image(8, 8, vec![])),
            Err(BuildError::EmptyAnnotation)
        );
    }

    #[test]
    fn classification_and_vqa() {
        let mut ann = image(600, 600, vec![]);
        ann.scene_label = Some("aircraft".into());
        let r = build_classification_record(&ann).unwrap();
        assert_eq!(r.prompt, CLASSIFICATION_PROMPT);
        assert_eq!(r.response, "aircraft.");
        ann.scene_label = Some(String::new());
        assert_eq!(
            build_classification_record(&ann),
            Err(BuildError::EmptyLabel)
        );

        let q = "Is a small road present? The answer to this question is";
        let r = build_vqa_record(q, "yes", "x", ModalityLabel::Opt).unwrap();
        assert_eq!(r.prompt, q);
        assert_eq!(r.response, "yes.");
        let r =
            build_vqa_record("Is a small road present?", "yes", "x", ModalityLabel::Opt).unwrap();
        assert_eq!(r.prompt, q);
        assert_eq!(
            build_vqa_record(q, " ", "x", ModalityLabel::Opt),
            Err(BuildError::EmptyLabel)
        );
    }

    #[test]
    fn relation() {
        let rel = RelationAnnotation {
            subject: obj("car", [10, 10, 20, 20], None),
            object: obj("road", [0, 0, 100, 50], None),
            relation: "driving on".into(),
        };
        let meta = image(100, 100, vec![]).meta();
        let r = build_relation_record(&rel, &meta).unwrap();
        assert_eq!(
            r.response,
            "subject: car, object: road, the car is <|rel|>driving on<|/rel|> the road."
        );
        assert_eq!(
            r.prompt,
            "<|reasoning|>What is the relationship between <|ref|>car<|/ref|><|det|>[[100,100,200,200]]<|/det|> \
and the object in <|det|>[[0,0,999,500]]<|/det|> in the image? And output their categories."
        );
        let parsed = r.check().unwrap();
        let rels = parsed
            .response
            .nodes
            .iter()
            .filter(|n| matches!(n, MarkupNode::Rel(_)))
            .count();
        assert_eq!(rels, 1);

        let same = RelationAnnotation {
            subject: obj("tank", [1, 1, 5, 5], None),
            object: obj("tank", [1, 1, 5, 5], None),
            relation: "next to".into(),
        };
        assert!(build_relation_record(&same, &meta).is_ok());
    }

    #[test]
    fn directions() {
        let d = |a, b, c, e| region_direction(&NormBox::new(a, b, c, e).unwrap());
        assert_eq!(d(400, 400, 600, 600), Direction9::Center);
        assert_eq!(d(0, 0, 100, 100), Direction9::UpperLeft);
        assert_eq!(d(900, 400, 999, 600), Direction9::Right);
        assert_eq!(d(0, 900, 10, 999), Direction9::LowerLeft);
        assert_eq!(d(400, 0, 500, 10), Direction9::Upper);
        assert_eq!(d(333, 333, 333, 333), Direction9::Center);
        assert_eq!(d(332, 666, 332, 666), Direction9::LowerLeft);
        assert_eq!(Direction9::UpperRight.to_string(), "upper right");
    }

    #[test]
    fn decomposition_empty_region() {
        let ann = image(1000, 1000, vec![obj("ship", [900, 900, 950, 950], None)]);
        let region = NormBox::new(0, 0, 100, 100).unwrap();
        let r = build_decomposition_record(region, &ann, &[]).unwrap();
        assert_eq!(
            r.prompt,
            "<|decomposition|>Analyze the region <|det|>[[0,0,100,100]]<|/det|> of the image."
        );
        assert_eq!(
            r.response,
            "Step1: Locate the target area: The target area locates at the upper left of the image.\n\
Step2: Perform object detection: There are 0 entities in the target area.\n\
Step3: Perform relation analysis: There are 0 relations found.\n\
Step4: Perform context summary: 0 object types with 0 interactions."
        );
        assert_eq!(
            check_decomposition(&r.response).unwrap(),
            DecompositionCounts {
                entities: 0,
                object_types: 0,
                relations: 0
            }
        );
    }

    #[test]
    fn decomposition_two_ships_one_relation() {
        let a = obj("ship", [100, 100, 200, 200], None);
        let b = obj("ship", [300, 300, 400, 400], None);
        let outside = obj("car", [900, 900, 990, 990], None);
        let ann = image(1000, 1000, vec![a.clone(), b.clone(), outside.clone()]);
        let rels = vec![
            RelationAnnotation {
                subject: a.clone(),
                object: b.clone(),
                relation: "next to".into(),
            },
            RelationAnnotation {
                subject: a,
                object: outside,
                relation: "far from".into(),
            },
        ];
        let region = NormBox::new(0, 0, 500, 500).unwrap();
        let r = build_decomposition_record(region, &ann, &rels).unwrap();
        assert!(r
            .response
            .ends_with("Step4: Perform context summary: 1 object types with 1 interactions."));
        assert!(r.response.contains(
            "There are 2 entities in the target area, including: 2 <|ref|>ship<|/ref|><|det|>[[100,100,200,200], [300,300,400,400]]<|/det|>."
        ));
        assert!(r.response.contains(
            "There are 1 relations found: <|ref|>ship<|/ref|><|det|>[[100,100,200,200]]<|/det|> is <|rel|>next to<|/rel|> the <|ref|>ship<|/ref|><|det|>[[300,300,400,400]]<|/det|>."
        ));
        assert_eq!(
            check_decomposition(&r.response).unwrap(),
            DecompositionCounts {
                entities: 2,
                object_types: 1,
                relations: 1
            }
        );
    }

    #[test]
    fn decomposition_checker_catches_tampering() {
        let ann = image(1000, 1000, vec![obj("ship", [100, 100, 200, 200], None)]);
        let region = NormBox::new(0, 0, 500, 500).unwrap();
        let r = build_decomposition_record(region, &ann, &[]).unwrap();
        let bad = r.response.replace("1 object types", "2 object types");
        assert!(check_decomposition(&bad).is_err());
        let bad = r
            .response
            .replace("There are 1 entities", "There are 3 entities");
        assert!(check_decomposition(&bad).is_err());
        assert!(check_decomposition("Step1: x").is_err());
    }

    fn scene(trajectory: Vec<Pose6>) -> SceneRecord {
        SceneRecord {
            description: "The row of grayish brown houses on Leslie Road to the left of the gray house at the intersection with Wellington Road".into(),
            landmark_name: "Wellington Road".into(),
            landmark_pos: Pos3::from_f64(120.5, 88.0, 12.25).unwrap(),
            target_name: "grayish brown houses".into(),
            target_pos: Pos3::from_f64(140.0, 90.5, 8.0).unwrap(),
            surroundings: vec!["Leslie Road".into(), "gray house".into()],
            start_pose: pose([100.0, 80.0, 30.0, 0.0, 0.0, 1.5]),
            trajectory,
        }
    }

    #[test]
    fn scheduling_single_point() {
        let s = scene(vec![pose([100.0, 80.0, 30.0, 0.0, 0.0, 1.5])]);
        let r = build_scheduling_record(&s, "city-1", ModalityLabel::Opt).unwrap();
        assert!(r
            .prompt
            .starts_with("<|navigation|>You need to formulate a flight plan for a quadcopter"));
        assert!(r.prompt.contains(
            "The target location is described as follows: The row of grayish brown houses on Leslie Road to the left of the gray house at the intersection with Wellington Road. "
        ));
        assert!(r.prompt.contains(
            "<|ref|>Wellington Road<|/ref|><|pos|>[120.5,88,12.25]<|/pos|>. Your starting 3D coordinates and orientation angles are <|pose|>[[100,80,30,0,0,1.5]]<|/pose|>."
        ));
        assert!(r
            .response
            .ends_with("Step 4: Trajectory: <|pose|>[[100,80,30,0,0,1.5]]<|/pose|>."));
        let parsed = r.check().unwrap();
        assert_eq!(parsed.prompt.task(), Some(TaskTag::Navigation));
        let poses: Vec<_> = parsed
            .response
            .nodes
            .iter()
            .filter_map(|n| match n {
                MarkupNode::Pose(p) => Some(p.len()),
                _ => None,
            })
            .collect();
        assert_eq!(poses, vec![1]);
    }

    #[test]
    fn scheduling_rejects_broken_scene() {
        let s = scene(vec![pose([0.0; 6])]);
        assert!(matches!(
            build_scheduling_record(&s, "x", ModalityLabel::Opt),
            Err(BuildError::InvariantViolation(_))
        ));
        let s = scene(vec![]);
        assert!(build_scheduling_record(&s, "x", ModalityLabel::Opt).is_err());
    }

    #[test]
    fn decision() {
        let start = pose([0.0, 0.0, 10.0, 0.0, 0.0, 0.0]);
        let goal = pose([50.0, 20.0, 10.0, 0.0, 0.0, 90.0]);
        let r = build_decision_record(
            &start,
            &goal,
            &["go straight".into()],
            vec!["a".into()],
            ModalityLabel::Opt,
        )
        .unwrap();
        assert_eq!(r.response, "Step1: go straight.");
        assert_eq!(
            r.prompt,
            "<|decision|>How to fly from position <|pose|>[[0,0,10,0,0,0]]<|/pose|> to position <|pose|>[[50,20,10,0,0,90]]<|/pose|>, and provide a detailed plan."
        );
        let r = build_decision_record(
            &start,
            &start,
            &["hover".into(), "slightly turn right.".into()],
            vec!["a".into(), "b".into()],
            ModalityLabel::Opt,
        )
        .unwrap();
        assert_eq!(r.response, "Step1: hover.\nStep2: slightly turn right.");
        assert_eq!(
            build_decision_record(&start, &goal, &[], vec!["a".into()], ModalityLabel::Opt),
            Err(BuildError::EmptySteps)
        );
    }
}
