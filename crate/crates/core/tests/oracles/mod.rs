//! Independent reference implementations shared by the integration and
//! acceptance tests. Everything here is written for clarity over speed.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rsvl_core::grammar::{Decimal, MarkupDoc, MarkupNode, NormBox, Pos3, Pose6, TaskTag};
use rsvl_core::metrics::{DetPrediction, GroundTruthBox};
use rsvl_core::trajdec::WeightFile;

// ---------------------------------------------------------------- markup

/// `(source, expected canonical form)` pairs.
pub fn markup_fixtures() -> Vec<(String, String)> {
    #[derive(serde::Deserialize)]
    struct Fixture {
        source: String,
        canonical: String,
    }
    let raw: Vec<Fixture> =
        serde_json::from_str(include_str!("../fixtures/markup.json")).expect("fixture json");
    raw.into_iter().map(|f| (f.source, f.canonical)).collect()
}

const TEXT_ALPHABET: &[&str] = &[
    "a",
    "Z",
    " ",
    "  ",
    "\n",
    "\t",
    ".",
    ",",
    "[",
    "]",
    "<",
    ">",
    "|",
    "0",
    "7",
    "-",
    "机",
    "é",
    "Step 1:",
    "There are",
    "|>",
    "<>",
    "||",
];

fn random_text<R: Rng>(rng: &mut R, allow_empty: bool) -> String {
    loop {
        let n = rng.random_range(if allow_empty { 0..6 } else { 1..6 });
        let mut s = String::new();
        for _ in 0..n {
            s.push_str(TEXT_ALPHABET[rng.random_range(0..TEXT_ALPHABET.len())]);
        }
        if !s.contains("<|") {
            return s;
        }
    }
}

fn random_lexeme<R: Rng>(rng: &mut R) -> Decimal {
    let mut s = String::new();
    if rng.random_bool(0.3) {
        s.push('-');
    }
    let int_digits = rng.random_range(1..5);
    for _ in 0..int_digits {
        s.push(char::from(b'0' + rng.random_range(0..10u8)));
    }
    if rng.random_bool(0.5) {
        s.push('.');
        for _ in 0..rng.random_range(1..4) {
            s.push(char::from(b'0' + rng.random_range(0..10u8)));
        }
    }
    if rng.random_bool(0.15) {
        s.push(if rng.random_bool(0.5) { 'e' } else { 'E' });
        match rng.random_range(0..3) {
            0 => s.push('+'),
            1 => s.push('-'),
            _ => {}
        }
        s.push(char::from(b'0' + rng.random_range(0..3u8)));
    }
    Decimal::parse(&s).unwrap_or_else(|| panic!("generator produced bad lexeme {s:?}"))
}

fn random_box<R: Rng>(rng: &mut R) -> NormBox {
    let (a, b) = (rng.random_range(0..1000u16), rng.random_range(0..1000u16));
    let (c, d) = (rng.random_range(0..1000u16), rng.random_range(0..1000u16));
    NormBox::new(a.min(b), c.min(d), a.max(b), c.max(d)).unwrap()
}

/// A random document satisfying every node invariant.
pub fn random_doc<R: Rng>(rng: &mut R) -> MarkupDoc {
    let mut nodes = Vec::new();
    if rng.random_bool(0.3) {
        nodes.push(MarkupNode::Task(TaskTag::ALL[rng.random_range(0..4)]));
    }
    let len = rng.random_range(0..10);
    for _ in 0..len {
        let prev_text = matches!(nodes.last(), Some(MarkupNode::Text(_)));
        let kind = rng.random_range(if prev_text { 1..6 } else { 0..6 });
        let node = match kind {
            0 => MarkupNode::Text(random_text(rng, false)),
            1 => MarkupNode::Ref(random_text(rng, true)),
            2 => MarkupNode::Rel(random_text(rng, true)),
            3 => MarkupNode::Pos(Pos3 {
                x: random_lexeme(rng),
                y: random_lexeme(rng),
                z: random_lexeme(rng),
            }),
            4 => MarkupNode::Pose(
                (0..rng.random_range(1..4))
                    .map(|_| Pose6(std::array::from_fn(|_| random_lexeme(rng))))
                    .collect(),
            ),
            _ => MarkupNode::Det(
                (0..rng.random_range(1..5))
                    .map(|_| random_box(rng))
                    .collect(),
            ),
        };
        nodes.push(node);
    }
    MarkupDoc::new(nodes)
}

// ------------------------------------------------------------- detection

fn iou_oracle(a: &NormBox, b: &NormBox) -> f64 {
    // count cells directly
    let cells = |b: &NormBox| {
        let mut s = BTreeSet::new();
        for x in b.x1()..=b.x2() {
            for y in b.y1()..=b.y2() {
                s.insert((x, y));
            }
        }
        s
    };
    let (ca, cb) = (cells(a), cells(b));
    let inter = ca.intersection(&cb).count();
    let union = ca.union(&cb).count();
    inter as f64 / union as f64
}

/// Exhaustive matcher: for each image, every partial injective assignment of
/// ranked predictions to ground truth is enumerated and the one whose
/// per-prediction keys `(matched, IoU, -gt index)` are lexicographically
/// largest in rank order is kept.
fn brute_force_hits(ranked: &[(usize, NormBox)], gts: &[Vec<NormBox>], thr: f64) -> Vec<bool> {
    let mut hits = vec![false; ranked.len()];
    for (img, boxes) in gts.iter().enumerate() {
        let idx: Vec<usize> = (0..ranked.len()).filter(|&k| ranked[k].0 == img).collect();
        let mut best: Option<Vec<(u8, f64, i64)>> = None;
        let mut best_assign: Vec<Option<usize>> = vec![None; idx.len()];
        let mut cur: Vec<Option<usize>> = Vec::new();
        enumerate(
            &idx,
            ranked,
            boxes,
            thr,
            &mut cur,
            &mut best,
            &mut best_assign,
        );
        for (slot, a) in best_assign.iter().enumerate() {
            hits[idx[slot]] = a.is_some();
        }
    }
    hits
}

fn enumerate(
    idx: &[usize],
    ranked: &[(usize, NormBox)],
    boxes: &[NormBox],
    thr: f64,
    cur: &mut Vec<Option<usize>>,
    best: &mut Option<Vec<(u8, f64, i64)>>,
    best_assign: &mut Vec<Option<usize>>,
) {
    if cur.len() == idx.len() {
        let key: Vec<(u8, f64, i64)> = cur
            .iter()
            .enumerate()
            .map(|(slot, a)| match a {
                None => (0, 0.0, 0),
                Some(j) => (
                    1,
                    iou_oracle(&ranked[idx[slot]].1, &boxes[*j]),
                    -(*j as i64),
                ),
            })
            .collect();
        let better = match best {
            None => true,
            Some(b) => key
                .iter()
                .zip(b.iter())
                .find(|(x, y)| x != y)
                .is_some_and(|(x, y)| x.partial_cmp(y) == Some(std::cmp::Ordering::Greater)),
        };
        if better {
            *best = Some(key);
            *best_assign = cur.clone();
        }
        return;
    }
    let slot = cur.len();
    cur.push(None);
    enumerate(idx, ranked, boxes, thr, cur, best, best_assign);
    cur.pop();
    for j in 0..boxes.len() {
        if cur.contains(&Some(j)) {
            continue;
        }
        if iou_oracle(&ranked[idx[slot]].1, &boxes[j]) >= thr {
            cur.push(Some(j));
            enumerate(idx, ranked, boxes, thr, cur, best, best_assign);
            cur.pop();
        }
    }
}

/// AP as the mean, over true positives, of the best precision reached at
/// that rank or any later one, scaled by recall per hit.
pub fn ap_oracle(hits: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let prec: Vec<f64> = (0..hits.len())
        .map(|k| hits[..=k].iter().filter(|&&h| h).count() as f64 / (k + 1) as f64)
        .collect();
    let mut total = 0.0;
    for k in 0..hits.len() {
        if hits[k] {
            total += prec[k..].iter().cloned().fold(0.0, f64::max);
        }
    }
    total / n_gt as f64
}

/// Per-class AP and mAP by exhaustive matching.
pub fn brute_force_map(
    preds: &[Vec<DetPrediction>],
    gts: &[Vec<GroundTruthBox>],
    thr: f64,
) -> (BTreeMap<String, f64>, f64) {
    let classes: BTreeSet<&str> = gts.iter().flatten().map(|g| g.category.as_str()).collect();
    let mut per_class = BTreeMap::new();
    for c in classes {
        let mut ranked: Vec<(f64, usize, usize, NormBox)> = Vec::new();
        let mut order = 0;
        for (img, ps) in preds.iter().enumerate() {
            for p in ps {
                if p.category == c {
                    ranked.push((p.confidence, order, img, p.bbox));
                    order += 1;
                }
            }
        }
        // confidence descending, then input order
        ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let ranked: Vec<(usize, NormBox)> = ranked.into_iter().map(|r| (r.2, r.3)).collect();
        let boxes: Vec<Vec<NormBox>> = gts
            .iter()
            .map(|g| {
                g.iter()
                    .filter(|x| x.category == c)
                    .map(|x| x.bbox)
                    .collect()
            })
            .collect();
        let n_gt = boxes.iter().map(Vec::len).sum();
        let hits = brute_force_hits(&ranked, &boxes, thr);
        per_class.insert(c.to_owned(), ap_oracle(&hits, n_gt));
    }
    let map = if per_class.is_empty() {
        0.0
    } else {
        per_class.values().sum::<f64>() / per_class.len() as f64
    };
    (per_class, map)
}

/// Small instance: up to 3 images, at most 2 classes, at most 5 predictions
/// and 5 ground-truth boxes per class, boxes crowded into a small area so
/// that overlaps and competition are common; confidences repeat to exercise
/// tie-breaking.
pub fn random_det_instance<R: Rng>(
    rng: &mut R,
) -> (Vec<Vec<DetPrediction>>, Vec<Vec<GroundTruthBox>>) {
    let images = rng.random_range(1..4);
    let classes = ["plane", "ship"];
    let n_classes = rng.random_range(1..3);
    let mut preds = vec![Vec::new(); images];
    let mut gts = vec![Vec::new(); images];
    let small_box = |rng: &mut R| {
        let x = rng.random_range(0..20u16);
        let y = rng.random_range(0..20u16);
        let w = rng.random_range(3..12u16);
        let h = rng.random_range(3..12u16);
        NormBox::new(x, y, x + w, y + h).unwrap()
    };
    for c in &classes[..n_classes] {
        for _ in 0..rng.random_range(0..6) {
            let img = rng.random_range(0..images);
            gts[img].push(GroundTruthBox {
                category: (*c).into(),
                bbox: small_box(rng),
            });
        }
        for _ in 0..rng.random_range(0..6) {
            let img = rng.random_range(0..images);
            preds[img].push(DetPrediction {
                category: (*c).into(),
                bbox: small_box(rng),
                confidence: [0.2, 0.5, 0.5, 0.9, 1.0][rng.random_range(0..5)],
            });
        }
    }
    (preds, gts)
}

// ------------------------------------------------------------------ text

/// LCS length by trying every subsequence of the shorter input.
pub fn lcs_oracle<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    assert!(short.len() <= 16, "oracle is exponential");
    let mut best = 0;
    for mask in 0u32..(1 << short.len()) {
        let sub: Vec<&T> = (0..short.len())
            .filter(|i| mask & (1 << i) != 0)
            .map(|i| &short[i])
            .collect();
        if sub.len() <= best {
            continue;
        }
        let mut it = long.iter();
        if sub.iter().all(|x| it.any(|y| y == *x)) {
            best = sub.len();
        }
    }
    best
}

// ------------------------------------------------------------- decoder

pub fn matvec(m: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    m.iter()
        .map(|row| {
            assert_eq!(row.len(), x.len());
            let mut s = 0.0;
            for j in 0..x.len() {
                s += row[j] * x[j];
            }
            s
        })
        .collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One GRU update written out component by component.
pub fn gru_step_scalar(w: &WeightFile, f: &[f64], h: &[f64]) -> Vec<f64> {
    let d = h.len();
    let mut out = vec![0.0; d];
    let mut r = vec![0.0; d];
    for i in 0..d {
        let mut a = w.b_r[i];
        for j in 0..d {
            a += w.w_r[i][j] * f[j] + w.u_r[i][j] * h[j];
        }
        r[i] = sig(a);
    }
    for i in 0..d {
        let mut az = w.b_z[i];
        let mut ac = w.b_c[i];
        for j in 0..d {
            az += w.w_z[i][j] * f[j] + w.u_z[i][j] * h[j];
            ac += w.w_c[i][j] * f[j] + w.u_c[i][j] * (r[j] * h[j]);
        }
        let z = sig(az);
        out[i] = (1.0 - z) * h[i] + z * ac.tanh();
    }
    out
}

/// Reference decode loop. Returns the states and whether the distance test
/// (rather than the step budget) ended it.
pub fn decode_scalar(
    w: &WeightFile,
    h_tra: &[f64],
    max_steps: usize,
    p: f64,
) -> (Vec<[f64; 6]>, bool) {
    let mut h = add(&matvec(&w.w_latent, h_tra), &w.b_latent);
    let mut states: Vec<[f64; 6]> = Vec::new();
    for _ in 0..max_steps {
        let f = add(&matvec(&w.w_state, &h), &w.b_state);
        h = gru_step_scalar(w, &f, &h);
        let o = add(&matvec(&w.w_out, &h), &w.b_out);
        let s: [f64; 6] = std::array::from_fn(|i| sig(o[i]));
        let stop = states.last().is_some_and(|prev| {
            prev.iter()
                .zip(&s)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
                < p
        });
        states.push(s);
        if stop {
            return (states, true);
        }
    }
    (states, false)
}
