use std::collections::{BTreeMap, HashMap};

use serde::Serialize;

use super::MetricsError;

pub const MAX_BLEU_ORDER: usize = 4;

/// Lower-cases, drops punctuation (kept only between two digits, as in
/// `3.5` or `1,000`) and splits on whitespace.
pub fn tokenize(s: &str) -> Vec<String> {
    let chars: Vec<char> = s.to_lowercase().chars().collect();
    let mut out = String::with_capacity(chars.len());
    for (i, &c) in chars.iter().enumerate() {
        let inside_number = i > 0
            && i + 1 < chars.len()
            && chars[i - 1].is_ascii_digit()
            && chars[i + 1].is_ascii_digit();
        if c.is_alphanumeric() || c.is_whitespace() || inside_number {
            out.push(c);
        }
    }
    out.split_whitespace().map(str::to_owned).collect()
}

/// Sufficient statistics for corpus BLEU. Sentence statistics are summed
/// with [`BleuStats::merge`] and scored once.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [u64; MAX_BLEU_ORDER],
    pub totals: [u64; MAX_BLEU_ORDER],
    pub candidate_len: u64,
    pub reference_len: u64,
}

fn ngram_counts<'a>(tokens: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], u64> {
    let mut m = HashMap::new();
    for g in tokens.windows(n) {
        *m.entry(g).or_insert(0) += 1;
    }
    m
}

impl BleuStats {
    pub fn sentence<S: AsRef<str>, R: AsRef<[S]>>(candidate: &[S], references: &[R]) -> Self {
        let cand: Vec<&str> = candidate.iter().map(AsRef::as_ref).collect();
        let refs: Vec<Vec<&str>> = references
            .iter()
            .map(|r| r.as_ref().iter().map(AsRef::as_ref).collect())
            .collect();
        let mut st = BleuStats {
            candidate_len: cand.len() as u64,
            ..Default::default()
        };
        // closest reference length, shorter one on ties
        st.reference_len = refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .unwrap_or(0) as u64;

        for n in 1..=MAX_BLEU_ORDER {
            let counts = ngram_counts(&cand, n);
            let mut max_ref: HashMap<&[&str], u64> = HashMap::new();
            for r in &refs {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            st.totals[n - 1] = cand.len().saturating_sub(n - 1) as u64;
            st.matches[n - 1] = counts
                .iter()
                .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
                .sum();
        }
        st
    }

    pub fn merge(&mut self, other: &BleuStats) {
        for i in 0..MAX_BLEU_ORDER {
            self.matches[i] += other.matches[i];
            self.totals[i] += other.totals[i];
        }
        self.candidate_len += other.candidate_len;
        self.reference_len += other.reference_len;
    }

    /// BLEU-n without smoothing: any zero precision gives 0.
    ///
    /// # Panics
    /// If `n` is outside `1..=4`.
    pub fn score(&self, n: usize) -> f64 {
        assert!(
            (1..=MAX_BLEU_ORDER).contains(&n),
            "BLEU order must be in 1..=4, got {n}"
        );
        if self.candidate_len == 0 || self.matches[..n].contains(&0) {
            return 0.0;
        }
        let log_p: f64 = (0..n)
            .map(|i| (self.matches[i] as f64 / self.totals[i] as f64).ln())
            .sum::<f64>()
            / n as f64;
        let (c, r) = (self.candidate_len as f64, self.reference_len as f64);
        let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
        bp * log_p.exp()
    }
}

/// Sentence-level BLEU-n, equal to corpus BLEU over a one-sentence corpus.
pub fn bleu<S: AsRef<str>, R: AsRef<[S]>>(candidate: &[S], references: &[R], n: usize) -> f64 {
    BleuStats::sentence(candidate, references).score(n)
}

pub fn lcs_len<S: PartialEq>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F-measure with equal weighting of precision and recall.
pub fn rouge_l<S: PartialEq>(candidate: &[S], reference: &[S]) -> f64 {
    let l = lcs_len(candidate, reference);
    if l == 0 {
        return 0.0;
    }
    // 2PR/(P+R) with P = l/|c|, R = l/|r|
    (2 * l) as f64 / (candidate.len() + reference.len()) as f64
}

/// Best ROUGE-L over several references; 0 with none.
pub fn rouge_l_multi<S: PartialEq, R: AsRef<[S]>>(candidate: &[S], references: &[R]) -> f64 {
    references
        .iter()
        .map(|r| rouge_l(candidate, r.as_ref()))
        .fold(0.0, f64::max)
}

/// Case-folded, trimmed, trailing periods removed.
pub fn normalize_answer(s: &str) -> String {
    s.trim().trim_end_matches('.').trim_end().to_lowercase()
}

/// Fraction of exact matches after [`normalize_answer`]. Empty input scores 0.
pub fn accuracy<A: AsRef<str>, B: AsRef<str>>(preds: &[A], gts: &[B]) -> Result<f64, MetricsError> {
    if preds.len() != gts.len() {
        return Err(MetricsError::LengthMismatch {
            preds: preds.len(),
            gts: gts.len(),
        });
    }
    if preds.is_empty() {
        return Ok(0.0);
    }
    let hits = preds
        .iter()
        .zip(gts)
        .filter(|(p, g)| normalize_answer(p.as_ref()) == normalize_answer(g.as_ref()))
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TypedAccuracy {
    /// Accuracy and item count per question type.
    pub per_type: BTreeMap<String, (f64, usize)>,
    /// Unweighted mean of the per-type accuracies.
    pub macro_avg: f64,
    /// Accuracy over all items.
    pub micro: f64,
}

/// Accuracy broken down by question type, from `(type, prediction, answer)`.
pub fn typed_accuracy<'a>(
    items: impl IntoIterator<Item = (&'a str, &'a str, &'a str)>,
) -> TypedAccuracy {
    let mut tally: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (ty, p, g) in items {
        let e = tally.entry(ty.to_owned()).or_default();
        e.0 += usize::from(normalize_answer(p) == normalize_answer(g));
        e.1 += 1;
    }
    let (hits, total) = tally
        .values()
        .fold((0, 0), |(h, t), &(a, b)| (h + a, t + b));
    let per_type: BTreeMap<String, (f64, usize)> = tally
        .into_iter()
        .map(|(k, (h, t))| (k, (h as f64 / t as f64, t)))
        .collect();
    let macro_avg = if per_type.is_empty() {
        0.0
    } else {
        per_type.values().map(|v| v.0).sum::<f64>() / per_type.len() as f64
    };
    TypedAccuracy {
        per_type,
        macro_avg,
        micro: if total == 0 {
            0.0
        } else {
            hits as f64 / total as f64
        },
    }
}
