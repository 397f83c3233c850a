//! Exact match, BLEU, token-level NER scoring and chunked score summaries.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::MetricsError;
use crate::lemma::LemmaPipeline;
use crate::textproc::{self, NormalizeOptions, Token};

pub const OUTSIDE: &str = "O";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmMode {
    Inflected,
    Lemmatized,
}

impl EmMode {
    pub const ALL: [EmMode; 2] = [EmMode::Inflected, EmMode::Lemmatized];

    pub fn name(self) -> &'static str {
        match self {
            EmMode::Inflected => "inflected",
            EmMode::Lemmatized => "lemmatized",
        }
    }
}

/// Canonical-script form used for inflected comparison: punctuation and
/// daṇḍas stripped, whitespace collapsed, Devanagari/IAST folded to SLP1.
pub fn em_key(text: &str) -> String {
    textproc::to_canonical_mixed(&textproc::normalize_with(text, NormalizeOptions::STRIP_ALL))
}

/// 1 when the prediction matches any acceptable answer, else 0.
pub fn exact_match(
    prediction: &str,
    acceptable: &[String],
    mode: EmMode,
    pipeline: &LemmaPipeline,
) -> Result<u8, MetricsError> {
    if acceptable.is_empty() {
        return Err(MetricsError::NoAcceptableAnswers);
    }
    let hit = match mode {
        EmMode::Inflected => {
            let p = em_key(prediction);
            acceptable.iter().any(|a| em_key(a) == p)
        }
        EmMode::Lemmatized => {
            let lem = |s: &str| pipeline.lemmatize_mixed(s).map_err(|e| MetricsError::Lemmatizer(e.to_string()));
            let p = lem(prediction)?;
            let mut hit = false;
            for a in acceptable {
                if lem(a)? == p {
                    hit = true;
                    break;
                }
            }
            hit
        }
    };
    Ok(hit as u8)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    pub bleu: f64,
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub candidate_len: usize,
    pub reference_len: usize,
}

fn bleu_tokens(s: &str) -> Vec<String> {
    textproc::normalize(s).split(' ').filter(|t| !t.is_empty()).map(str::to_string).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_default() += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and candidate n-gram totals for n = 1..=max_n.
fn sentence_stats(cand: &[String], refs: &[Vec<String>], max_n: usize) -> (Vec<usize>, Vec<usize>) {
    let mut matches = vec![0; max_n];
    let mut totals = vec![0; max_n];
    for n in 1..=max_n {
        let cand_counts = ngram_counts(cand, n);
        let mut max_ref: HashMap<&[String], usize> = HashMap::new();
        for r in refs {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_default();
                *e = (*e).max(c);
            }
        }
        for (g, c) in &cand_counts {
            matches[n - 1] += (*c).min(max_ref.get(g).copied().unwrap_or(0));
        }
        totals[n - 1] = cand.len().saturating_sub(n - 1);
    }
    (matches, totals)
}

fn closest_ref_len(cand_len: usize, refs: &[Vec<String>]) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(cand_len), r))
        .unwrap_or(0)
}

fn brevity_penalty(c: usize, r: usize) -> f64 {
    if c == 0 {
        0.0
    } else if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    }
}

/// Geometric mean over the orders that have any candidate n-grams; an order
/// with no candidate n-grams at all is left out rather than zeroing the score.
fn combine(matches: &[usize], totals: &[usize], epsilon: Option<f64>) -> (f64, Vec<f64>) {
    let mut log_sum = 0.0;
    let mut used = 0;
    let mut precisions = Vec::with_capacity(matches.len());
    let mut zero = false;
    for (&m, &t) in matches.iter().zip(totals) {
        if t == 0 {
            precisions.push(0.0);
            continue;
        }
        let num = if m == 0 { epsilon.unwrap_or(0.0) } else { m as f64 };
        let p = num / t as f64;
        precisions.push(m as f64 / t as f64);
        if p == 0.0 {
            zero = true;
        } else {
            log_sum += p.ln();
        }
        used += 1;
    }
    if zero || used == 0 {
        return (0.0, precisions);
    }
    ((log_sum / used as f64).exp(), precisions)
}

fn check_refs(candidates: usize, references: &[Vec<String>]) -> Result<(), MetricsError> {
    if candidates != references.len() {
        return Err(MetricsError::LengthMismatch { what: "candidates vs references", left: candidates, right: references.len() });
    }
    if let Some(i) = references.iter().position(Vec::is_empty) {
        return Err(MetricsError::NoReferences(i));
    }
    Ok(())
}

/// Corpus-level BLEU on a 0–1 scale, unsmoothed.
pub fn corpus_bleu(candidates: &[String], references: &[Vec<String>], max_n: usize) -> Result<BleuScore, MetricsError> {
    check_refs(candidates.len(), references)?;
    let mut matches = vec![0; max_n];
    let mut totals = vec![0; max_n];
    let (mut c_len, mut r_len) = (0, 0);
    for (cand, refs) in candidates.iter().zip(references) {
        let cand = bleu_tokens(cand);
        let refs: Vec<Vec<String>> = refs.iter().map(|r| bleu_tokens(r)).collect();
        let (m, t) = sentence_stats(&cand, &refs, max_n);
        for n in 0..max_n {
            matches[n] += m[n];
            totals[n] += t[n];
        }
        c_len += cand.len();
        r_len += closest_ref_len(cand.len(), &refs);
    }
    let (geo, precisions) = combine(&matches, &totals, None);
    let bp = brevity_penalty(c_len, r_len);
    Ok(BleuScore { bleu: geo * bp, precisions, brevity_penalty: bp, candidate_len: c_len, reference_len: r_len })
}

pub const SENTENCE_BLEU_EPSILON: f64 = 0.1;

/// Sentence BLEU with zero match counts replaced by ε before taking logs.
pub fn sentence_bleu(candidate: &str, references: &[String], max_n: usize) -> Result<f64, MetricsError> {
    if references.is_empty() {
        return Err(MetricsError::NoReferences(0));
    }
    let cand = bleu_tokens(candidate);
    let refs: Vec<Vec<String>> = references.iter().map(|r| bleu_tokens(r)).collect();
    let (m, t) = sentence_stats(&cand, &refs, max_n);
    let (geo, _) = combine(&m, &t, Some(SENTENCE_BLEU_EPSILON));
    Ok(geo * brevity_penalty(cand.len(), closest_ref_len(cand.len(), &refs)))
}

/// Model NER output: BI tag → surface words, in the order the model gave.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NerPrediction {
    pub entries: Vec<(String, Vec<String>)>,
}

impl NerPrediction {
    pub fn new(entries: Vec<(String, Vec<String>)>) -> Self {
        NerPrediction { entries }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.iter().all(|(_, w)| w.is_empty())
    }

    /// Prediction that reproduces a gold tag sequence exactly.
    pub fn from_gold(tokens: &[String], tags: &[String]) -> Self {
        let mut entries: Vec<(String, Vec<String>)> = Vec::new();
        for (tok, tag) in tokens.iter().zip(tags) {
            if tag == OUTSIDE {
                continue;
            }
            match entries.iter_mut().find(|(t, _)| t == tag) {
                Some((_, words)) => words.push(tok.clone()),
                None => entries.push((tag.clone(), vec![tok.clone()])),
            }
        }
        NerPrediction { entries }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NerAlignment {
    pub tags: Vec<String>,
    /// (tag, word) pairs that matched no free token.
    pub spurious: Vec<(String, String)>,
}

fn surface_key(s: &str) -> String {
    textproc::normalize(s)
}

pub fn align_ner(tokens: &[Token], pred: &NerPrediction) -> NerAlignment {
    let keys: Vec<String> = tokens.iter().map(|t| surface_key(&t.surface)).collect();
    let mut tags: Vec<Option<&str>> = vec![None; tokens.len()];
    let mut spurious = Vec::new();
    for (tag, words) in &pred.entries {
        if tag == OUTSIDE {
            continue;
        }
        for word in words {
            let w = surface_key(word);
            match (0..keys.len()).find(|&i| tags[i].is_none() && keys[i] == w) {
                Some(i) => tags[i] = Some(tag),
                None => spurious.push((tag.clone(), word.clone())),
            }
        }
    }
    NerAlignment {
        tags: tags.into_iter().map(|t| t.unwrap_or(OUTSIDE).to_string()).collect(),
        spurious,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TagScore {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl TagScore {
    fn finish(mut self) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        self.precision = ratio(self.tp, self.tp + self.fp);
        self.recall = ratio(self.tp, self.tp + self.fn_);
        self.f1 = if self.precision + self.recall > 0.0 {
            2.0 * self.precision * self.recall / (self.precision + self.recall)
        } else {
            0.0
        };
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// Entity types, then "O" last. Rows are gold, columns predicted.
    pub labels: Vec<String>,
    pub counts: Vec<Vec<usize>>,
    pub row_normalized: Vec<Vec<f64>>,
}

impl ConfusionMatrix {
    pub fn from_pairs<'a>(labels: Vec<String>, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        let index: HashMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
        let mut counts = vec![vec![0; labels.len()]; labels.len()];
        for (g, p) in pairs {
            counts[index[g]][index[p]] += 1;
        }
        let row_normalized = counts
            .iter()
            .map(|row| {
                let total: usize = row.iter().sum();
                row.iter().map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 }).collect()
            })
            .collect();
        ConfusionMatrix { labels, counts, row_normalized }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NerScores {
    pub per_tag: BTreeMap<String, TagScore>,
    pub macro_f1: f64,
    pub confusion: ConfusionMatrix,
    pub spurious: usize,
}

/// Entity type of a BI tag ("B-LOC" → "LOC"); "O" stays "O".
pub fn entity_type(tag: &str) -> &str {
    tag.strip_prefix("B-").or_else(|| tag.strip_prefix("I-")).unwrap_or(tag)
}

/// Token-level scoring over BI tags.
///
/// `type_order` fixes the confusion matrix label order (types not listed are
/// appended in sorted order); "O" is always the last label.
pub fn ner_macro_f1(
    gold_tokens: &[Vec<String>],
    gold_tags: &[Vec<String>],
    preds: &[NerPrediction],
    type_order: &[String],
) -> Result<NerScores, MetricsError> {
    if gold_tags.len() != preds.len() {
        return Err(MetricsError::SentenceCountMismatch { gold: gold_tags.len(), pred: preds.len() });
    }
    if gold_tokens.len() != gold_tags.len() {
        return Err(MetricsError::LengthMismatch { what: "gold tokens vs tags", left: gold_tokens.len(), right: gold_tags.len() });
    }
    let mut per_tag: BTreeMap<String, TagScore> = BTreeMap::new();
    let mut pairs: Vec<(String, String)> = Vec::new();
    let mut spurious = 0;
    for ((tokens, tags), pred) in gold_tokens.iter().zip(gold_tags).zip(preds) {
        if tokens.len() != tags.len() {
            return Err(MetricsError::LengthMismatch { what: "sentence tokens vs tags", left: tokens.len(), right: tags.len() });
        }
        let toks: Vec<Token> =
            tokens.iter().enumerate().map(|(index, s)| Token { surface: s.clone(), index }).collect();
        let aligned = align_ner(&toks, pred);
        for (g, p) in tags.iter().zip(&aligned.tags) {
            if g == p {
                if g != OUTSIDE {
                    per_tag.entry(g.clone()).or_default().tp += 1;
                }
            } else {
                if p != OUTSIDE {
                    per_tag.entry(p.clone()).or_default().fp += 1;
                }
                if g != OUTSIDE {
                    per_tag.entry(g.clone()).or_default().fn_ += 1;
                }
            }
            pairs.push((entity_type(g).to_string(), entity_type(p).to_string()));
        }
        for (tag, _) in &aligned.spurious {
            per_tag.entry(tag.clone()).or_default().fp += 1;
            spurious += 1;
        }
    }
    let per_tag: BTreeMap<String, TagScore> = per_tag.into_iter().map(|(k, v)| (k, v.finish())).collect();
    let macro_f1 =
        if per_tag.is_empty() { 0.0 } else { per_tag.values().map(|s| s.f1).sum::<f64>() / per_tag.len() as f64 };

    let seen: BTreeSet<&str> =
        pairs.iter().flat_map(|(g, p)| [g.as_str(), p.as_str()]).filter(|t| *t != OUTSIDE).collect();
    let mut labels: Vec<String> = type_order.iter().filter(|t| t.as_str() != OUTSIDE).cloned().collect();
    for t in seen {
        if !labels.iter().any(|l| l == t) {
            labels.push(t.to_string());
        }
    }
    labels.push(OUTSIDE.to_string());
    let confusion = ConfusionMatrix::from_pairs(labels, pairs.iter().map(|(g, p)| (g.as_str(), p.as_str())));
    Ok(NerScores { per_tag, macro_f1, confusion, spurious })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkedSummary {
    pub n_chunks: usize,
    pub chunk_sizes: Vec<usize>,
    pub per_chunk_means: Vec<f64>,
    /// Item-weighted mean (equals the mean over all items).
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub min: f64,
    pub max: f64,
}

/// Contiguous index ranges of `n_chunks` chunks; the remainder goes to the
/// last chunk.
pub fn chunk_ranges(n_items: usize, n_chunks: usize) -> Result<Vec<Range<usize>>, MetricsError> {
    if n_chunks == 0 || n_items < n_chunks {
        return Err(MetricsError::TooFewItems { needed: n_chunks.max(1), got: n_items });
    }
    let size = n_items / n_chunks;
    Ok((0..n_chunks)
        .map(|i| {
            let end = if i + 1 == n_chunks { n_items } else { (i + 1) * size };
            i * size..end
        })
        .collect())
}

/// Item order used for chunking: dataset order, or a seeded permutation.
pub fn chunk_order(n_items: usize, shuffle_seed: Option<u64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n_items).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
}

pub fn chunked_summary(scores: &[f64], n_chunks: usize) -> Result<ChunkedSummary, MetricsError> {
    chunked_summary_with(scores, n_chunks, None)
}

pub fn chunked_summary_with(
    scores: &[f64],
    n_chunks: usize,
    shuffle_seed: Option<u64>,
) -> Result<ChunkedSummary, MetricsError> {
    let ranges = chunk_ranges(scores.len(), n_chunks)?;
    let order = chunk_order(scores.len(), shuffle_seed);
    let means = ranges
        .iter()
        .map(|r| order[r.clone()].iter().map(|&i| scores[i]).sum::<f64>() / r.len() as f64)
        .collect();
    let sizes = ranges.iter().map(|r| r.len()).collect();
    let mut s = ChunkedSummary::from_chunk_values(means, sizes);
    s.mean = scores.iter().sum::<f64>() / scores.len() as f64;
    Ok(s)
}

impl ChunkedSummary {
    /// Summary over per-chunk values computed elsewhere (e.g. corpus BLEU of
    /// each chunk). `mean` is weighted by chunk size.
    pub fn from_chunk_values(values: Vec<f64>, sizes: Vec<usize>) -> Self {
        let total: usize = sizes.iter().sum();
        let mean = if total == 0 {
            0.0
        } else {
            values.iter().zip(&sizes).map(|(v, &n)| v * n as f64).sum::<f64>() / total as f64
        };
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        ChunkedSummary {
            n_chunks: values.len(),
            chunk_sizes: sizes,
            mean,
            median: quantile(&sorted, 0.5),
            q1: quantile(&sorted, 0.25),
            q3: quantile(&sorted, 0.75),
            min: sorted.first().copied().unwrap_or(0.0),
            max: sorted.last().copied().unwrap_or(0.0),
            per_chunk_means: values,
        }
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => 0.0,
        1 => sorted[0],
        n => {
            let pos = q * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
        }
    }
}
