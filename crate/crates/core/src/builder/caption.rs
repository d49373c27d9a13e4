//! Rule-based captions and the attribute/similarity gate applied to
//! candidate captions.

use std::collections::{BTreeMap, HashMap};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{ImageAnnotation, ObjectAnnotation};

pub const CAPTION_PROMPT: &str = "Please provide a short depiction of the picture:";

/// Fraction of the benchmark similarity a caption must reach.
pub const SIMILARITY_RATIO: f64 = 0.8;

/// Naive `+s` plural, matching the corpus style ("2 aircrafts").
pub fn pluralize(word: &str) -> String {
    format!("{word}s")
}

/// Groups objects by `(category, shape)` in order of first appearance.
pub(crate) fn attribute_groups(objects: &[ObjectAnnotation]) -> Vec<(&str, Option<&str>, usize)> {
    let mut groups: Vec<(&str, Option<&str>, usize)> = Vec::new();
    for o in objects {
        let key = (o.category.as_str(), o.shape_attr.as_deref());
        match groups.iter_mut().find(|g| (g.0, g.1) == key) {
            Some(g) => g.2 += 1,
            None => groups.push((key.0, key.1, 1)),
        }
    }
    groups
}

pub(crate) fn object_sentence(count: usize, category: &str, shape: Option<&str>) -> String {
    let (verb, noun) = if count == 1 {
        ("is", category.to_owned())
    } else {
        ("are", pluralize(category))
    };
    match shape {
        Some(s) => format!("There {verb} {count} {noun} in the image, which {verb} {s} in size."),
        None => format!("There {verb} {count} {noun} in the image."),
    }
}

pub(crate) fn scene_sentence(label: &str) -> String {
    format!("The image shows a {label} scene.")
}

/// Surface form to canonical form, for categories and shapes alike.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SynonymTable(pub BTreeMap<String, String>);

impl SynonymTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, surface: impl Into<String>, canonical: impl Into<String>) {
        self.0.insert(surface.into(), canonical.into());
    }
}

/// Scores how well a caption matches its image.
pub trait SimilarityScorer {
    fn score(&self, caption: &str, image_id: &str) -> f64;
}

/// Deterministic scorer backed by a per-image table.
#[derive(Debug, Clone, Default)]
pub struct FixedScores {
    pub scores: HashMap<String, f64>,
    pub default: f64,
}

impl SimilarityScorer for FixedScores {
    fn score(&self, _caption: &str, image_id: &str) -> f64 {
        self.scores.get(image_id).copied().unwrap_or(self.default)
    }
}

/// A similarity score paired with the benchmark it is judged against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityGate {
    score: f64,
    benchmark: f64,
}

impl SimilarityGate {
    /// `None` unless the benchmark is positive and both values are finite.
    pub fn new(score: f64, benchmark: f64) -> Option<Self> {
        (score.is_finite() && benchmark.is_finite() && benchmark > 0.0)
            .then_some(SimilarityGate { score, benchmark })
    }

    pub fn required(&self) -> f64 {
        SIMILARITY_RATIO * self.benchmark
    }

    pub fn passes(&self) -> bool {
        self.score >= self.required()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "check", rename_all = "snake_case")]
pub enum CaptionCheck {
    Count {
        category: String,
        stated: usize,
        annotated: usize,
    },
    Category {
        category: String,
    },
    Shape {
        category: String,
        shape: String,
    },
    Scene {
        stated: String,
        annotated: Option<String>,
    },
    NoClaims,
    Similarity {
        score: f64,
        required: f64,
    },
}

impl CaptionCheck {
    pub fn kind(&self) -> &'static str {
        match self {
            CaptionCheck::Count { .. } => "count",
            CaptionCheck::Category { .. } => "category",
            CaptionCheck::Shape { .. } => "shape",
            CaptionCheck::Scene { .. } => "scene",
            CaptionCheck::NoClaims => "no_claims",
            CaptionCheck::Similarity { .. } => "similarity",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationResult {
    pub passed: bool,
    pub failures: Vec<CaptionCheck>,
}

/// One `There is/are N <category> in the image[, which is/are <shape> in size].` claim.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectClaim {
    pub count: usize,
    pub category: String,
    pub shape: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CaptionClaims {
    pub objects: Vec<ObjectClaim>,
    pub scenes: Vec<String>,
}

fn object_claim_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?i)there (?:is|are) (\d+) ([^,.]+?) in the image(?:, which (?:is|are) ([^,.]+?) in size)?\.",
        )
        .expect("valid regex")
    })
}

fn scene_claim_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)the image shows an? ([^,.]+?) scene\.").expect("valid regex")
    })
}

/// Extracts the count/category/shape and scene statements a caption makes.
pub fn extract_claims(caption: &str) -> CaptionClaims {
    let objects = object_claim_re()
        .captures_iter(caption)
        .filter_map(|c| {
            Some(ObjectClaim {
                count: c[1].parse().ok()?,
                category: c[2].trim().to_owned(),
                shape: c.get(3).map(|m| m.as_str().trim().to_owned()),
            })
        })
        .collect();
    let scenes = scene_claim_re()
        .captures_iter(caption)
        .map(|c| c[1].trim().to_owned())
        .collect();
    CaptionClaims { objects, scenes }
}

/// Equivalence classes over words: synonym pairs and `w` ~ `w+s` are joined.
/// Adding synonyms only ever merges classes.
struct Vocabulary {
    ids: HashMap<String, usize>,
    parent: Vec<usize>,
}

impl Vocabulary {
    fn new() -> Self {
        Vocabulary {
            ids: HashMap::new(),
            parent: Vec::new(),
        }
    }

    fn id(&mut self, word: &str) -> usize {
        let w = word.trim().to_lowercase();
        if let Some(&i) = self.ids.get(&w) {
            return i;
        }
        let i = self.parent.len();
        self.parent.push(i);
        self.ids.insert(w.clone(), i);
        if let Some(stem) = w.strip_suffix('s').filter(|s| !s.is_empty()) {
            let j = self.id(stem);
            self.union(i, j);
        }
        i
    }

    fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.parent[hi] = lo;
        }
    }

    fn class(&mut self, word: &str) -> usize {
        let i = self.id(word);
        self.find(i)
    }
}

/// Checks a candidate caption against its annotation.
///
/// Every object count, category and stated shape must agree with the
/// annotation up to synonyms, every annotated category must be mentioned, and
/// a supplied similarity score must reach 80% of the benchmark.
pub fn validate_caption(
    caption: &str,
    ann: &ImageAnnotation,
    synonyms: &SynonymTable,
    gate: Option<SimilarityGate>,
) -> ValidationResult {
    let claims = extract_claims(caption);
    let mut vocab = Vocabulary::new();
    for (surface, canonical) in &synonyms.0 {
        let (a, b) = (vocab.id(surface), vocab.id(canonical));
        vocab.union(a, b);
    }

    let mut failures = Vec::new();
    if claims.objects.is_empty() && claims.scenes.is_empty() {
        failures.push(CaptionCheck::NoClaims);
    }

    // class -> (display name, total, shape class -> count)
    type Tally = BTreeMap<usize, (String, usize, BTreeMap<usize, (String, usize)>)>;
    let mut stated: Tally = BTreeMap::new();
    for c in &claims.objects {
        let cat = vocab.class(&c.category);
        let e = stated
            .entry(cat)
            .or_insert_with(|| (c.category.clone(), 0, BTreeMap::new()));
        e.1 += c.count;
        if let Some(s) = &c.shape {
            let sc = vocab.class(s);
            e.2.entry(sc).or_insert_with(|| (s.clone(), 0)).1 += c.count;
        }
    }
    let mut annotated: Tally = BTreeMap::new();
    for o in &ann.objects {
        let cat = vocab.class(&o.category);
        let e = annotated
            .entry(cat)
            .or_insert_with(|| (o.category.clone(), 0, BTreeMap::new()));
        e.1 += 1;
        if let Some(s) = &o.shape_attr {
            let sc = vocab.class(s);
            e.2.entry(sc).or_insert_with(|| (s.clone(), 0)).1 += 1;
        }
    }

    for (cat, (name, n, shapes)) in &stated {
        let Some((_, m, ann_shapes)) = annotated.get(cat) else {
            failures.push(CaptionCheck::Category {
                category: name.clone(),
            });
            continue;
        };
        if n != m {
            failures.push(CaptionCheck::Count {
                category: name.clone(),
                stated: *n,
                annotated: *m,
            });
            continue;
        }
        for (sc, (shape, k)) in shapes {
            let have = ann_shapes.get(sc).map_or(0, |s| s.1);
            if *k > have {
                failures.push(CaptionCheck::Shape {
                    category: name.clone(),
                    shape: shape.clone(),
                });
            }
        }
    }
    for (cat, (name, _, _)) in &annotated {
        if !stated.contains_key(cat) {
            failures.push(CaptionCheck::Category {
                category: name.clone(),
            });
        }
    }

    for scene in &claims.scenes {
        let ok = match &ann.scene_label {
            Some(label) => vocab.class(scene) == vocab.class(label),
            None => false,
        };
        if !ok {
            failures.push(CaptionCheck::Scene {
                stated: scene.clone(),
                annotated: ann.scene_label.clone(),
            });
        }
    }

    if let Some(g) = gate {
        if !g.passes() {
            failures.push(CaptionCheck::Similarity {
                score: g.score,
                required: g.required(),
            });
        }
    }

    ValidationResult {
        passed: failures.is_empty(),
        failures,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builder::test_support::{image, obj};

    fn two_small_aircraft() -> ImageAnnotation {
        image(
            800,
            800,
            vec![
                obj("aircraft", [10, 10, 50, 50], Some("small")),
                obj("aircraft", [100, 100, 150, 150], Some("small")),
            ],
        )
    }

    #[test]
    fn sentences() {
        assert_eq!(
            object_sentence(2, "aircraft", Some("small")),
            "There are 2 aircrafts in the image, which are small in size."
        );
        assert_eq!(
            object_sentence(1, "ship", None),
            "There is 1 ship in the image."
        );
        assert_eq!(
            object_sentence(1, "ship", Some("large")),
            "There is 1 ship in the image, which is large in size."
        );
        assert_eq!(scene_sentence("harbor"), "The image shows a harbor scene.");
    }

    #[test]
    fn claims_are_extracted() {
        let c = extract_claims("There are 2 aircrafts in the image, which are small in size. There is 1 ship in the image.");
        assert_eq!(
            c.objects,
            vec![
                ObjectClaim {
                    count: 2,
                    category: "aircrafts".into(),
                    shape: Some("small".into())
                },
                ObjectClaim {
                    count: 1,
                    category: "ship".into(),
                    shape: None
                },
            ]
        );
    }

    #[test]
    fn two_small_aircraft_caption_passes() {
        let r = validate_caption(
            "There are 2 aircrafts in the image, which are small in size.",
            &two_small_aircraft(),
            &SynonymTable::new(),
            None,
        );
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn wrong_count_fails() {
        let ann = image(
            800,
            800,
            vec![
                obj("ship", [0, 0, 5, 5], None),
                obj("ship", [9, 9, 20, 20], None),
            ],
        );
        let r = validate_caption(
            "There are 3 ships in the image.",
            &ann,
            &SynonymTable::new(),
            None,
        );
        assert!(!r.passed);
        assert_eq!(
            r.failures,
            vec![CaptionCheck::Count {
                category: "ships".into(),
                stated: 3,
                annotated: 2
            }]
        );
    }

    #[test]
    fn similarity_boundary() {
        let caption = "There are 2 aircrafts in the image, which are small in size.";
        let bench = 0.5;
        let fail = SimilarityGate::new(0.79 * bench, bench).unwrap();
        let r = validate_caption(
            caption,
            &two_small_aircraft(),
            &SynonymTable::new(),
            Some(fail),
        );
        assert_eq!(r.failures.len(), 1);
        assert_eq!(r.failures[0].kind(), "similarity");
        let pass = SimilarityGate::new(0.8 * bench, bench).unwrap();
        assert!(
            validate_caption(
                caption,
                &two_small_aircraft(),
                &SynonymTable::new(),
                Some(pass)
            )
            .passed
        );
        assert!(SimilarityGate::new(0.3, 0.0).is_none());
    }

    #[test]
    fn synonyms_rescue_category_and_shape() {
        let caption = "There are 2 planes in the image, which are tiny in size.";
        let ann = two_small_aircraft();
        assert!(!validate_caption(caption, &ann, &SynonymTable::new(), None).passed);
        let mut syn = SynonymTable::new();
        syn.insert("plane", "aircraft");
        let r = validate_caption(caption, &ann, &syn, None);
        assert_eq!(
            r.failures.iter().map(|f| f.kind()).collect::<Vec<_>>(),
            ["shape"]
        );
        syn.insert("tiny", "small");
        assert!(validate_caption(caption, &ann, &syn, None).passed);
    }

    #[test]
    fn wrong_shape_and_missing_category() {
        let mut ann = two_small_aircraft();
        ann.objects.push(obj("ship", [0, 0, 1, 1], None));
        let r = validate_caption(
            "There are 2 aircrafts in the image, which are large in size.",
            &ann,
            &SynonymTable::new(),
            None,
        );
        let kinds: Vec<_> = r.failures.iter().map(|f| f.kind()).collect();
        assert_eq!(kinds, ["shape", "category"]);
    }

    #[test]
    fn scene_caption() {
        let mut ann = image(500, 500, vec![]);
        ann.scene_label = Some("harbor".into());
        let syn = SynonymTable::new();
        assert!(validate_caption("The image shows a harbor scene.", &ann, &syn, None).passed);
        assert!(!validate_caption("The image shows a forest scene.", &ann, &syn, None).passed);
        let r = validate_caption("A pretty picture.", &ann, &syn, None);
        assert_eq!(r.failures, vec![CaptionCheck::NoClaims]);
    }

    #[test]
    fn fixed_scorer() {
        let mut s = FixedScores {
            default: 0.1,
            ..Default::default()
        };
        s.scores.insert("a".into(), 0.9);
        assert_eq!(s.score("x", "a"), 0.9);
        assert_eq!(s.score("x", "b"), 0.1);
    }
}
