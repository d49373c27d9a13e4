//! Special-token markup used in every prompt and response.
//!
//! A markup string is prose interleaved with typed spans:
//!
//! ```text
//! <|navigation|>...<|ref|>Wellington Road<|/ref|><|pos|>[1.0,2.0,3.0]<|/pos|>
//! ```
//!
//! Task tags (`<|navigation|>`, `<|decision|>`, `<|decomposition|>`,
//! `<|reasoning|>`) stand alone and may only open a document. The paired
//! tags `ref`, `rel`, `pos`, `pose` and `det` wrap a payload: free text for
//! `ref`/`rel`, a bracketed numeric list for the other three.
//!
//! [`parse`] and [`emit`] are inverse up to whitespace inside numeric lists,
//! which [`canonicalize`] normalizes directly on the source text.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Upper bound of the normalized coordinate domain.
pub const MAX_COORD: u16 = 999;

const OPEN: &str = "<|";
const CLOSE: &str = "|>";
const MAX_LIST_DEPTH: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GrammarError {
    #[error("unbalanced tag <|{tag}|> at byte {offset}")]
    UnbalancedTag { tag: String, offset: usize },
    #[error("malformed number at byte {offset}")]
    MalformedNumber { offset: usize },
    #[error("coordinate {literal} outside [0, 999] at byte {offset}")]
    CoordOutOfRange { literal: String, offset: usize },
    #[error("unknown tag <|{name}|> at byte {offset}")]
    UnknownTag { name: String, offset: usize },
    #[error("unterminated tag at byte {offset}")]
    UnterminatedTag { offset: usize },
    #[error("empty <|{tag}|> list at byte {offset}")]
    EmptyList { tag: &'static str, offset: usize },
    #[error("<|{tag}|> tuple at byte {offset} has {found} values, expected {expected}")]
    WrongArity {
        tag: &'static str,
        expected: usize,
        found: usize,
        offset: usize,
    },
    #[error("inverted box at byte {offset}")]
    InvertedBox { offset: usize },
    #[error("task tag at byte {offset} is not the first node")]
    MisplacedTaskTag { offset: usize },
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
}

impl GrammarError {
    /// Byte offset into the source string, when the error came from parsing.
    pub fn offset(&self) -> Option<usize> {
        match self {
            GrammarError::UnbalancedTag { offset, .. }
            | GrammarError::MalformedNumber { offset }
            | GrammarError::CoordOutOfRange { offset, .. }
            | GrammarError::UnknownTag { offset, .. }
            | GrammarError::UnterminatedTag { offset }
            | GrammarError::EmptyList { offset, .. }
            | GrammarError::WrongArity { offset, .. }
            | GrammarError::InvertedBox { offset }
            | GrammarError::MisplacedTaskTag { offset } => Some(*offset),
            GrammarError::InvariantViolation(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskTag {
    Navigation,
    Decision,
    Decomposition,
    Reasoning,
}

impl TaskTag {
    pub const ALL: [TaskTag; 4] = [
        TaskTag::Navigation,
        TaskTag::Decision,
        TaskTag::Decomposition,
        TaskTag::Reasoning,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskTag::Navigation => "navigation",
            TaskTag::Decision => "decision",
            TaskTag::Decomposition => "decomposition",
            TaskTag::Reasoning => "reasoning",
        }
    }

    /// The serialized token, e.g. `<|navigation|>`.
    pub fn token(self) -> &'static str {
        match self {
            TaskTag::Navigation => "<|navigation|>",
            TaskTag::Decision => "<|decision|>",
            TaskTag::Decomposition => "<|decomposition|>",
            TaskTag::Reasoning => "<|reasoning|>",
        }
    }
}

/// Sensor modality of an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalityLabel {
    #[default]
    Opt,
    Sar,
    Ir,
}

impl ModalityLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            ModalityLabel::Opt => "opt",
            ModalityLabel::Sar => "sar",
            ModalityLabel::Ir => "ir",
        }
    }
}

impl fmt::Display for ModalityLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModalityLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "opt" => Ok(ModalityLabel::Opt),
            "sar" => Ok(ModalityLabel::Sar),
            "ir" => Ok(ModalityLabel::Ir),
            other => Err(format!(
                "unknown modality `{other}` (expected opt, sar or ir)"
            )),
        }
    }
}

/// Integer coordinate in `[0, 999]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct NormCoord(u16);

impl NormCoord {
    pub fn new(value: u16) -> Option<Self> {
        (value <= MAX_COORD).then_some(NormCoord(value))
    }

    pub fn get(self) -> u16 {
        self.0
    }
}

impl<'de> Deserialize<'de> for NormCoord {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let v = u16::deserialize(deserializer)?;
        NormCoord::new(v)
            .ok_or_else(|| serde::de::Error::custom(format!("coordinate {v} outside [0, 999]")))
    }
}

/// Horizontal box in normalized coordinates, corners inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NormBox {
    x1: NormCoord,
    y1: NormCoord,
    x2: NormCoord,
    y2: NormCoord,
}

impl NormBox {
    /// Returns `None` when a coordinate exceeds 999 or the corners are inverted.
    pub fn new(x1: u16, y1: u16, x2: u16, y2: u16) -> Option<Self> {
        let b = NormBox {
            x1: NormCoord::new(x1)?,
            y1: NormCoord::new(y1)?,
            x2: NormCoord::new(x2)?,
            y2: NormCoord::new(y2)?,
        };
        (x1 <= x2 && y1 <= y2).then_some(b)
    }

    pub fn x1(&self) -> u16 {
        self.x1.0
    }
    pub fn y1(&self) -> u16 {
        self.y1.0
    }
    pub fn x2(&self) -> u16 {
        self.x2.0
    }
    pub fn y2(&self) -> u16 {
        self.y2.0
    }

    pub fn to_array(self) -> [u16; 4] {
        [self.x1(), self.y1(), self.x2(), self.y2()]
    }

    /// Box center, doubled so it stays integral.
    pub fn center2(&self) -> (u32, u32) {
        (
            u32::from(self.x1()) + u32::from(self.x2()),
            u32::from(self.y1()) + u32::from(self.y2()),
        )
    }

    pub fn contains_point2(&self, (cx2, cy2): (u32, u32)) -> bool {
        let (x1, y1, x2, y2) = (
            2 * u32::from(self.x1()),
            2 * u32::from(self.y1()),
            2 * u32::from(self.x2()),
            2 * u32::from(self.y2()),
        );
        (x1..=x2).contains(&cx2) && (y1..=y2).contains(&cy2)
    }
}

impl fmt::Display for NormBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{},{},{},{}]",
            self.x1(),
            self.y1(),
            self.x2(),
            self.y2()
        )
    }
}

impl Serialize for NormBox {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_array().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for NormBox {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let [x1, y1, x2, y2] = <[u16; 4]>::deserialize(deserializer)?;
        NormBox::new(x1, y1, x2, y2).ok_or_else(|| {
            serde::de::Error::custom(format!(
                "invalid normalized box [{x1},{y1},{x2},{y2}]: coordinates must be in [0, 999] with x1<=x2, y1<=y2"
            ))
        })
    }
}

/// Pixel-space rectangle, corners inclusive of the image extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PixelRect {
    pub x1: u32,
    pub y1: u32,
    pub x2: u32,
    pub y2: u32,
}

impl PixelRect {
    pub fn new(x1: u32, y1: u32, x2: u32, y2: u32) -> Self {
        PixelRect { x1, y1, x2, y2 }
    }
}

impl Serialize for PixelRect {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        [self.x1, self.y1, self.x2, self.y2].serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for PixelRect {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let [x1, y1, x2, y2] = <[u32; 4]>::deserialize(deserializer)?;
        Ok(PixelRect { x1, y1, x2, y2 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum BoxError {
    #[error("image extent must be at least 1x1 (got {width}x{height})")]
    InvalidExtent { width: u32, height: u32 },
    #[error("inverted pixel box")]
    InvertedBox,
    #[error("pixel box exceeds the {width}x{height} image")]
    OutOfBounds { width: u32, height: u32 },
}

fn normalize_coord(px: u32, extent: u32) -> u16 {
    let v = u64::from(px) * 1000 / u64::from(extent);
    v.min(u64::from(MAX_COORD)) as u16
}

/// Maps a pixel rectangle onto `[0, 999]` with `floor(px * 1000 / extent)`,
/// clamped at 999.
pub fn normalize_box(px: PixelRect, width: u32, height: u32) -> Result<NormBox, BoxError> {
    if width == 0 || height == 0 {
        return Err(BoxError::InvalidExtent { width, height });
    }
    if px.x1 > px.x2 || px.y1 > px.y2 {
        return Err(BoxError::InvertedBox);
    }
    if px.x2 > width || px.y2 > height {
        return Err(BoxError::OutOfBounds { width, height });
    }
    let b = NormBox::new(
        normalize_coord(px.x1, width),
        normalize_coord(px.y1, height),
        normalize_coord(px.x2, width),
        normalize_coord(px.y2, height),
    );
    // floor is monotone, so ordering survives
    Ok(b.expect("normalized coordinates are ordered and clamped"))
}

// Pixel inside the preimage of `v` closest to (at or below) the cell center
// (v + 0.5) * extent / 1000.
fn denormalize_coord(v: u16, extent: u32) -> u32 {
    let v = u64::from(v);
    let e = u64::from(extent);
    let center = (2 * v + 1) * e / 2000;
    let lower = (v * e).div_ceil(1000);
    center.max(lower).min(e) as u32
}

/// Inverse of [`normalize_box`]: each coordinate maps to the pixel nearest
/// the center of its normalized cell. Exact inverse whenever the extent is at
/// least 1000 pixels.
pub fn denormalize_box(b: NormBox, width: u32, height: u32) -> Result<PixelRect, BoxError> {
    if width == 0 || height == 0 {
        return Err(BoxError::InvalidExtent { width, height });
    }
    Ok(PixelRect {
        x1: denormalize_coord(b.x1(), width),
        y1: denormalize_coord(b.y1(), height),
        x2: denormalize_coord(b.x2(), width),
        y2: denormalize_coord(b.y2(), height),
    })
}

/// A finite decimal that remembers its source lexeme, so scene coordinates
/// pass through parse/emit verbatim.
#[derive(Debug, Clone)]
pub struct Decimal {
    value: f64,
    text: String,
}

impl Decimal {
    pub fn from_f64(value: f64) -> Option<Self> {
        value.is_finite().then(|| Decimal {
            value,
            text: format!("{value}"),
        })
    }

    /// Accepts `-?digits(.digits)?([eE][+-]?digits)?` with a finite value.
    pub fn parse(lexeme: &str) -> Option<Self> {
        if !is_decimal_lexeme(lexeme) {
            return None;
        }
        let value: f64 = lexeme.parse().ok()?;
        value.is_finite().then(|| Decimal {
            value,
            text: lexeme.to_owned(),
        })
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }
}

impl PartialEq for Decimal {
    fn eq(&self, other: &Self) -> bool {
        self.text == other.text
    }
}

impl Eq for Decimal {}

impl fmt::Display for Decimal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

impl Serialize for Decimal {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_f64(self.value)
    }
}

impl<'de> Deserialize<'de> for Decimal {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let v = f64::deserialize(deserializer)?;
        Decimal::from_f64(v).ok_or_else(|| serde::de::Error::custom("non-finite number"))
    }
}

fn is_decimal_lexeme(s: &str) -> bool {
    let b = s.as_bytes();
    let mut i = 0;
    let digits = |i: &mut usize| {
        let start = *i;
        while *i < b.len() && b[*i].is_ascii_digit() {
            *i += 1;
        }
        *i > start
    };
    if b.first() == Some(&b'-') {
        i += 1;
    }
    if !digits(&mut i) {
        return false;
    }
    if i < b.len() && b[i] == b'.' {
        i += 1;
        if !digits(&mut i) {
            return false;
        }
    }
    if i < b.len() && (b[i] == b'e' || b[i] == b'E') {
        i += 1;
        if i < b.len() && (b[i] == b'+' || b[i] == b'-') {
            i += 1;
        }
        if !digits(&mut i) {
            return false;
        }
    }
    i == b.len()
}

/// Scene-space 3D position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[Decimal; 3]", into = "[Decimal; 3]")]
pub struct Pos3 {
    pub x: Decimal,
    pub y: Decimal,
    pub z: Decimal,
}

impl Pos3 {
    pub fn from_f64(x: f64, y: f64, z: f64) -> Option<Self> {
        Some(Pos3 {
            x: Decimal::from_f64(x)?,
            y: Decimal::from_f64(y)?,
            z: Decimal::from_f64(z)?,
        })
    }

    pub fn values(&self) -> [f64; 3] {
        [self.x.value(), self.y.value(), self.z.value()]
    }
}

impl From<[Decimal; 3]> for Pos3 {
    fn from([x, y, z]: [Decimal; 3]) -> Self {
        Pos3 { x, y, z }
    }
}

impl From<Pos3> for [Decimal; 3] {
    fn from(p: Pos3) -> Self {
        [p.x, p.y, p.z]
    }
}

impl fmt::Display for Pos3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{},{}]", self.x, self.y, self.z)
    }
}

/// Position `(x, y, z)` plus roll, pitch and yaw `(phi, theta, psi)`, all
/// kept in the units they were given in.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Pose6(pub [Decimal; 6]);

impl Pose6 {
    pub fn from_f64(v: [f64; 6]) -> Option<Self> {
        let mut out = Vec::with_capacity(6);
        for x in v {
            out.push(Decimal::from_f64(x)?);
        }
        Some(Pose6(out.try_into().ok()?))
    }

    pub fn values(&self) -> [f64; 6] {
        std::array::from_fn(|i| self.0[i].value())
    }

    pub fn position(&self) -> [f64; 3] {
        [self.0[0].value(), self.0[1].value(), self.0[2].value()]
    }
}

impl fmt::Display for Pose6 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{v}")?;
        }
        f.write_str("]")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MarkupNode {
    Text(String),
    Task(TaskTag),
    Ref(String),
    Pos(Pos3),
    Pose(Vec<Pose6>),
    Det(Vec<NormBox>),
    Rel(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MarkupDoc {
    pub nodes: Vec<MarkupNode>,
}

impl MarkupDoc {
    pub fn new(nodes: Vec<MarkupNode>) -> Self {
        MarkupDoc { nodes }
    }

    pub fn task(&self) -> Option<TaskTag> {
        match self.nodes.first() {
            Some(MarkupNode::Task(t)) => Some(*t),
            _ => None,
        }
    }

    pub fn boxes(&self) -> impl Iterator<Item = &NormBox> {
        self.nodes.iter().flat_map(|n| match n {
            MarkupNode::Det(b) => b.as_slice(),
            _ => &[],
        })
    }

    /// Number of paired-tag spans (every node other than text and task tags).
    pub fn span_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n, MarkupNode::Text(_) | MarkupNode::Task(_)))
            .count()
    }

    /// Relation labels not found in `vocabulary`, as `(node index, label)`.
    /// Labels are open text by default; this is an opt-in closed-set check.
    pub fn unknown_relations<'a>(
        &'a self,
        vocabulary: &std::collections::BTreeSet<String>,
    ) -> Vec<(usize, &'a str)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n {
                MarkupNode::Rel(l) if !vocabulary.contains(l.as_str()) => Some((i, l.as_str())),
                _ => None,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SpanKind {
    Ref,
    Rel,
    Pos,
    Pose,
    Det,
}

impl SpanKind {
    fn name(self) -> &'static str {
        match self {
            SpanKind::Ref => "ref",
            SpanKind::Rel => "rel",
            SpanKind::Pos => "pos",
            SpanKind::Pose => "pose",
            SpanKind::Det => "det",
        }
    }

    fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "ref" => SpanKind::Ref,
            "rel" => SpanKind::Rel,
            "pos" => SpanKind::Pos,
            "pose" => SpanKind::Pose,
            "det" => SpanKind::Det,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Token {
    Task(TaskTag),
    Open(SpanKind),
    Close(SpanKind),
}

impl Token {
    fn classify(name: &str) -> Option<Token> {
        if let Some(t) = TaskTag::ALL.iter().find(|t| t.name() == name) {
            return Some(Token::Task(*t));
        }
        match name.strip_prefix('/') {
            Some(inner) => SpanKind::from_name(inner).map(Token::Close),
            None => SpanKind::from_name(name).map(Token::Open),
        }
    }
}

/// Reads the token starting at `start` (which must point at `<|`).
/// Returns the token and the offset just past `|>`.
fn read_token(src: &str, start: usize) -> Result<(Token, usize), GrammarError> {
    let body = start + OPEN.len();
    let len = src[body..]
        .find(CLOSE)
        .ok_or(GrammarError::UnterminatedTag { offset: start })?;
    let name = &src[body..body + len];
    let token = Token::classify(name).ok_or_else(|| GrammarError::UnknownTag {
        name: name.to_owned(),
        offset: start,
    })?;
    Ok((token, body + len + CLOSE.len()))
}

/// Parses a markup string into its node list.
pub fn parse(text: &str) -> Result<MarkupDoc, GrammarError> {
    let mut nodes = Vec::new();
    let mut pos = 0;
    while pos < text.len() {
        let Some(rel) = text[pos..].find(OPEN) else {
            nodes.push(MarkupNode::Text(text[pos..].to_owned()));
            break;
        };
        let tag_start = pos + rel;
        if tag_start > pos {
            nodes.push(MarkupNode::Text(text[pos..tag_start].to_owned()));
        }
        let (token, after) = read_token(text, tag_start)?;
        match token {
            Token::Task(t) => {
                if !nodes.is_empty() {
                    return Err(GrammarError::MisplacedTaskTag { offset: tag_start });
                }
                nodes.push(MarkupNode::Task(t));
                pos = after;
            }
            Token::Close(kind) => {
                return Err(GrammarError::UnbalancedTag {
                    tag: format!("/{}", kind.name()),
                    offset: tag_start,
                });
            }
            Token::Open(kind) => {
                let unbalanced = || GrammarError::UnbalancedTag {
                    tag: kind.name().to_owned(),
                    offset: tag_start,
                };
                let close_start = text[after..]
                    .find(OPEN)
                    .map(|i| after + i)
                    .ok_or_else(unbalanced)?;
                let (closing, end) = read_token(text, close_start)?;
                if closing != Token::Close(kind) {
                    return Err(unbalanced());
                }
                let payload = &text[after..close_start];
                nodes.push(parse_span(kind, payload, after)?);
                pos = end;
            }
        }
    }
    Ok(MarkupDoc { nodes })
}

fn parse_span(kind: SpanKind, payload: &str, base: usize) -> Result<MarkupNode, GrammarError> {
    match kind {
        SpanKind::Ref => Ok(MarkupNode::Ref(payload.to_owned())),
        SpanKind::Rel => Ok(MarkupNode::Rel(payload.to_owned())),
        SpanKind::Pos => {
            let list = parse_list(payload, base)?;
            let values = flat_tuple(&list, kind, 3)?;
            let [x, y, z] = decimals(values)?;
            Ok(MarkupNode::Pos(Pos3 { x, y, z }))
        }
        SpanKind::Pose => {
            let list = parse_list(payload, base)?;
            let tuples = outer_tuples(&list, kind)?;
            let poses = tuples
                .iter()
                .map(|t| {
                    let vals = flat_tuple(t, kind, 6)?;
                    Ok(Pose6(decimals(vals)?))
                })
                .collect::<Result<Vec<_>, GrammarError>>()?;
            Ok(MarkupNode::Pose(poses))
        }
        SpanKind::Det => {
            let list = parse_list(payload, base)?;
            let tuples = outer_tuples(&list, kind)?;
            let boxes = tuples
                .iter()
                .map(|t| {
                    let vals = flat_tuple(t, kind, 4)?;
                    let [x1, y1, x2, y2] = coords(vals)?;
                    NormBox::new(x1, y1, x2, y2)
                        .ok_or(GrammarError::InvertedBox { offset: t.offset })
                })
                .collect::<Result<Vec<_>, GrammarError>>()?;
            Ok(MarkupNode::Det(boxes))
        }
    }
}

#[derive(Debug)]
struct Item<'a> {
    offset: usize,
    kind: ItemKind<'a>,
}

#[derive(Debug)]
enum ItemKind<'a> {
    Num(&'a str),
    List(Vec<Item<'a>>),
}

/// Whole payload must be a single bracketed list, surrounded only by whitespace.
fn parse_list(payload: &str, base: usize) -> Result<Item<'_>, GrammarError> {
    let mut lx = ListLexer {
        src: payload,
        pos: 0,
        base,
    };
    lx.skip_ws();
    if lx.peek() != Some(b'[') {
        return Err(GrammarError::MalformedNumber {
            offset: lx.offset(),
        });
    }
    let item = lx.list(0)?;
    lx.skip_ws();
    if lx.pos != payload.len() {
        return Err(GrammarError::MalformedNumber {
            offset: lx.offset(),
        });
    }
    Ok(item)
}

struct ListLexer<'a> {
    src: &'a str,
    pos: usize,
    base: usize,
}

impl<'a> ListLexer<'a> {
    fn offset(&self) -> usize {
        self.base + self.pos
    }

    fn peek(&self) -> Option<u8> {
        self.src.as_bytes().get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(c) if c.is_ascii_whitespace()) {
            self.pos += 1;
        }
    }

    fn malformed(&self) -> GrammarError {
        GrammarError::MalformedNumber {
            offset: self.offset(),
        }
    }

    fn list(&mut self, depth: usize) -> Result<Item<'a>, GrammarError> {
        let offset = self.offset();
        if depth >= MAX_LIST_DEPTH {
            return Err(self.malformed());
        }
        self.pos += 1; // '['
        let mut items = Vec::new();
        self.skip_ws();
        if self.peek() == Some(b']') {
            self.pos += 1;
            return Ok(Item {
                offset,
                kind: ItemKind::List(items),
            });
        }
        loop {
            self.skip_ws();
            let item = match self.peek() {
                Some(b'[') => self.list(depth + 1)?,
                Some(_) => self.number()?,
                None => return Err(self.malformed()),
            };
            items.push(item);
            self.skip_ws();
            match self.peek() {
                Some(b',') => self.pos += 1,
                Some(b']') => {
                    self.pos += 1;
                    return Ok(Item {
                        offset,
                        kind: ItemKind::List(items),
                    });
                }
                _ => return Err(self.malformed()),
            }
        }
    }

    fn number(&mut self) -> Result<Item<'a>, GrammarError> {
        let start = self.pos;
        while matches!(
            self.peek(),
            Some(c) if c.is_ascii_alphanumeric() || matches!(c, b'-' | b'+' | b'.')
        ) {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.malformed());
        }
        Ok(Item {
            offset: self.base + start,
            kind: ItemKind::Num(&self.src[start..self.pos]),
        })
    }
}

fn outer_tuples<'i, 'a>(
    item: &'i Item<'a>,
    kind: SpanKind,
) -> Result<&'i [Item<'a>], GrammarError> {
    let tag = kind.name();
    match &item.kind {
        ItemKind::List(v) if v.is_empty() => Err(GrammarError::EmptyList {
            tag,
            offset: item.offset,
        }),
        ItemKind::List(v) => Ok(v),
        ItemKind::Num(_) => Err(GrammarError::MalformedNumber {
            offset: item.offset,
        }),
    }
}

fn flat_tuple<'a>(
    item: &Item<'a>,
    kind: SpanKind,
    arity: usize,
) -> Result<Vec<(&'a str, usize)>, GrammarError> {
    let tag = kind.name();
    let ItemKind::List(values) = &item.kind else {
        return Err(GrammarError::MalformedNumber {
            offset: item.offset,
        });
    };
    let mut out = Vec::with_capacity(values.len());
    for v in values {
        match v.kind {
            ItemKind::Num(s) => out.push((s, v.offset)),
            ItemKind::List(_) => {
                return Err(GrammarError::MalformedNumber { offset: v.offset });
            }
        }
    }
    if out.len() != arity {
        return Err(GrammarError::WrongArity {
            tag,
            expected: arity,
            found: out.len(),
            offset: item.offset,
        });
    }
    Ok(out)
}

fn decimals<const N: usize>(vals: Vec<(&str, usize)>) -> Result<[Decimal; N], GrammarError> {
    let parsed = vals
        .into_iter()
        .map(|(s, offset)| Decimal::parse(s).ok_or(GrammarError::MalformedNumber { offset }))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(parsed.try_into().expect("arity checked"))
}

fn coords<const N: usize>(vals: Vec<(&str, usize)>) -> Result<[u16; N], GrammarError> {
    let parsed = vals
        .into_iter()
        .map(|(s, offset)| parse_coord(s, offset))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(parsed.try_into().expect("arity checked"))
}

fn parse_coord(s: &str, offset: usize) -> Result<u16, GrammarError> {
    let digits = s.strip_prefix('-').unwrap_or(s);
    if digits.is_empty() || !digits.bytes().all(|c| c.is_ascii_digit()) {
        return Err(GrammarError::MalformedNumber { offset });
    }
    if digits.len() > 1 && digits.starts_with('0') {
        return Err(GrammarError::MalformedNumber { offset });
    }
    let out_of_range = || GrammarError::CoordOutOfRange {
        literal: s.to_owned(),
        offset,
    };
    if s.starts_with('-') {
        return Err(out_of_range());
    }
    match digits.parse::<u32>() {
        Ok(v) if v <= u32::from(MAX_COORD) => Ok(v as u16),
        _ => Err(out_of_range()),
    }
}

/// Serializes a document in canonical form.
pub fn emit(doc: &MarkupDoc) -> Result<String, GrammarError> {
    let mut out = String::new();
    let mut prev_text = false;
    for (i, node) in doc.nodes.iter().enumerate() {
        let is_text = matches!(node, MarkupNode::Text(_));
        match node {
            MarkupNode::Text(t) => {
                if t.is_empty() {
                    return Err(violation(format!("empty text node at index {i}")));
                }
                if prev_text {
                    return Err(violation(format!("adjacent text nodes at index {i}")));
                }
                check_free_text(t, i)?;
                out.push_str(t);
            }
            MarkupNode::Task(t) => {
                if i != 0 {
                    return Err(violation(format!("task tag at index {i}, must be first")));
                }
                out.push_str(t.token());
            }
            MarkupNode::Ref(name) => {
                check_free_text(name, i)?;
                push_span(&mut out, "ref", name);
            }
            MarkupNode::Rel(label) => {
                check_free_text(label, i)?;
                push_span(&mut out, "rel", label);
            }
            MarkupNode::Pos(p) => push_span(&mut out, "pos", &p.to_string()),
            MarkupNode::Pose(poses) => {
                if poses.is_empty() {
                    return Err(violation(format!("empty pose list at index {i}")));
                }
                push_span(&mut out, "pose", &join_tuples(poses));
            }
            MarkupNode::Det(boxes) => {
                if boxes.is_empty() {
                    return Err(violation(format!("empty det list at index {i}")));
                }
                push_span(&mut out, "det", &join_tuples(boxes));
            }
        }
        prev_text = is_text;
    }
    Ok(out)
}

fn violation(msg: String) -> GrammarError {
    GrammarError::InvariantViolation(msg)
}

fn check_free_text(s: &str, index: usize) -> Result<(), GrammarError> {
    if s.contains(OPEN) {
        return Err(violation(format!("node {index} contains a `<|` sequence")));
    }
    Ok(())
}

fn push_span(out: &mut String, tag: &str, payload: &str) {
    out.push_str("<|");
    out.push_str(tag);
    out.push_str("|>");
    out.push_str(payload);
    out.push_str("<|/");
    out.push_str(tag);
    out.push_str("|>");
}

/// `[[a,b], [c,d]]`: one space after each comma between tuples, none inside.
pub fn join_tuples<T: fmt::Display>(items: &[T]) -> String {
    let mut s = String::from("[");
    for (i, it) in items.iter().enumerate() {
        if i > 0 {
            s.push_str(", ");
        }
        s.push_str(&it.to_string());
    }
    s.push(']');
    s
}

/// Canonical spelling of a markup string, computed lexically: whitespace inside
/// `pos`/`pose`/`det` payloads is removed and tuples are separated by `", "`.
/// Everything else is copied byte for byte.
pub fn canonicalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    const NUMERIC_OPENS: [&str; 3] = ["<|pos|>", "<|pose|>", "<|det|>"];
    while let Some(i) = rest.find(OPEN) {
        let (head, tail) = rest.split_at(i);
        out.push_str(head);
        match NUMERIC_OPENS.iter().find(|t| tail.starts_with(**t)) {
            Some(tag) => {
                out.push_str(tag);
                let body = &tail[tag.len()..];
                let end = body.find(OPEN).unwrap_or(body.len());
                let squeezed: String = body[..end]
                    .chars()
                    .filter(|c| !c.is_ascii_whitespace())
                    .collect();
                out.push_str(&squeezed.replace("],", "], "));
                rest = &body[end..];
            }
            None => {
                out.push_str(OPEN);
                rest = &tail[OPEN.len()..];
            }
        }
    }
    out.push_str(rest);
    out
}

/// True when `text` contains no `<|` sequence and can be embedded as free text.
pub fn is_free_text(text: &str) -> bool {
    !text.contains(OPEN)
}
