//! Tokenization and surface-overlap metrics used both for evaluation and as
//! the scoring function that partitions overgenerated candidates.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use rust_stemmers::{Algorithm, Stemmer};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Numerator used in place of a zero n-gram match count.
pub const BLEU_EPSILON: f64 = 0.1;
pub const BLEU_MAX_ORDER: usize = 4;

const METEOR_ALPHA: f64 = 0.9;
const METEOR_BETA: f64 = 3.0;
const METEOR_GAMMA: f64 = 0.5;
/// Search budget for the minimal-chunk METEOR alignment. Past it the best
/// alignment found so far is used.
const METEOR_NODE_BUDGET: usize = 200_000;

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenSeq {
    pub tokens: Vec<String>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn joined(&self) -> String {
        self.tokens.join(" ")
    }
}

impl<S: Into<String>> FromIterator<S> for TokenSeq {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        TokenSeq {
            tokens: iter.into_iter().map(Into::into).collect(),
        }
    }
}

/// Lowercases, splits on whitespace and separates punctuation into single
/// tokens. `[value_<name>]` placeholders stay whole.
pub fn tokenize(text: &str) -> TokenSeq {
    let lower = text.to_lowercase();
    let mut tokens = Vec::new();
    let mut word = String::new();
    let mut i = 0;
    while i < lower.len() {
        if let Some(len) = placeholder_at(&lower[i..]) {
            flush(&mut word, &mut tokens);
            tokens.push(lower[i..i + len].to_string());
            i += len;
            continue;
        }
        let ch = lower[i..].chars().next().expect("in bounds");
        if ch.is_whitespace() {
            flush(&mut word, &mut tokens);
        } else if ch.is_ascii_punctuation() || (!ch.is_ascii() && is_unicode_punct(ch)) {
            flush(&mut word, &mut tokens);
            tokens.push(ch.to_string());
        } else {
            word.push(ch);
        }
        i += ch.len_utf8();
    }
    flush(&mut word, &mut tokens);
    TokenSeq { tokens }
}

fn is_unicode_punct(ch: char) -> bool {
    matches!(ch, '\u{2010}'..='\u{2027}' | '\u{3000}'..='\u{303F}' | '\u{FF01}'..='\u{FF0F}')
}

fn flush(word: &mut String, tokens: &mut Vec<String>) {
    if !word.is_empty() {
        tokens.push(std::mem::take(word));
    }
}

/// Byte length of a placeholder starting at the head of `s`, if any.
fn placeholder_at(s: &str) -> Option<usize> {
    let body = s.strip_prefix("[value_")?;
    let name_len = body
        .bytes()
        .take_while(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || *b == b'_')
        .count();
    (name_len > 0 && body.as_bytes().get(name_len) == Some(&b']')).then_some(7 + name_len + 1)
}

/// Clipped n-gram statistics for one or more candidate/reference pairs.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BleuStats {
    pub matches: [usize; BLEU_MAX_ORDER],
    pub totals: [usize; BLEU_MAX_ORDER],
    pub cand_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn from_pair(cand: &TokenSeq, reference: &TokenSeq) -> Self {
        let mut s = BleuStats {
            cand_len: cand.len(),
            ref_len: reference.len(),
            ..Default::default()
        };
        for n in 1..=BLEU_MAX_ORDER {
            let c = ngram_counts(&cand.tokens, n);
            let r = ngram_counts(&reference.tokens, n);
            s.totals[n - 1] = cand.len().saturating_sub(n - 1);
            s.matches[n - 1] = c
                .iter()
                .map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0)))
                .sum();
        }
        s
    }

    pub fn add(&mut self, other: &BleuStats) {
        for n in 0..BLEU_MAX_ORDER {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.cand_len += other.cand_len;
        self.ref_len += other.ref_len;
    }

    /// Geometric mean of the n-gram precisions times the brevity penalty.
    /// Orders for which the candidate side has no n-grams at all are left out
    /// of the mean, so a short sentence scored against itself gets 1.
    pub fn score(&self) -> f64 {
        if self.cand_len == 0 {
            return 0.0;
        }
        let orders = self.totals.iter().take_while(|&&t| t > 0).count();
        let log_sum: f64 = (0..orders)
            .map(|n| {
                let num = if self.matches[n] == 0 {
                    BLEU_EPSILON
                } else {
                    self.matches[n] as f64
                };
                (num / self.totals[n] as f64).ln()
            })
            .sum();
        let bp = if self.cand_len >= self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.cand_len as f64).exp()
        };
        bp * (log_sum / orders as f64).exp()
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

fn require_ref(reference: &TokenSeq) -> Result<()> {
    if reference.is_empty() {
        Err(Error::invalid("reference must be non-empty"))
    } else {
        Ok(())
    }
}

pub fn sentence_bleu(cand: &TokenSeq, reference: &TokenSeq) -> Result<f64> {
    require_ref(reference)?;
    Ok(BleuStats::from_pair(cand, reference).score())
}

/// Corpus BLEU: counts and lengths are summed over all pairs before the
/// precisions and brevity penalty are formed.
pub fn corpus_bleu<'a, I>(pairs: I) -> Result<f64>
where
    I: IntoIterator<Item = (&'a TokenSeq, &'a TokenSeq)>,
{
    let mut total = BleuStats::default();
    let mut n = 0usize;
    for (cand, reference) in pairs {
        require_ref(reference)?;
        total.add(&BleuStats::from_pair(cand, reference));
        n += 1;
    }
    if n == 0 {
        return Err(Error::invalid("corpus BLEU needs at least one pair"));
    }
    Ok(total.score())
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
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

/// ROUGE-L balanced F1 over the longest common subsequence.
pub fn rouge_l(cand: &TokenSeq, reference: &TokenSeq) -> Result<f64> {
    require_ref(reference)?;
    if cand.is_empty() {
        return Ok(0.0);
    }
    let lcs = lcs_len(&cand.tokens, &reference.tokens);
    if lcs == 0 {
        return Ok(0.0);
    }
    let p = lcs as f64 / cand.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    Ok(2.0 * p * r / (p + r))
}

fn stemmer() -> &'static Stemmer {
    static STEMMER: OnceLock<Stemmer> = OnceLock::new();
    STEMMER.get_or_init(|| Stemmer::create(Algorithm::English))
}

pub fn stem(token: &str) -> String {
    stemmer().stem(token).into_owned()
}

/// Alignment summary used by [`meteor`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MeteorAlignment {
    pub matches: usize,
    pub exact: usize,
    pub chunks: usize,
}

struct ChunkSearch<'a> {
    cand: &'a [String],
    reference: &'a [String],
    cand_stems: &'a [String],
    ref_stems: &'a [String],
    target_matches: usize,
    target_exact: usize,
    used: Vec<bool>,
    best: usize,
    nodes: usize,
}

impl ChunkSearch<'_> {
    fn dfs(&mut self, i: usize, prev: Option<usize>, chunks: usize, matched: usize, exact: usize) {
        self.nodes += 1;
        if chunks >= self.best || self.nodes > METEOR_NODE_BUDGET {
            return;
        }
        let remaining = self.cand.len() - i;
        if matched + remaining < self.target_matches || exact + remaining < self.target_exact {
            return;
        }
        if i == self.cand.len() {
            if matched == self.target_matches && exact == self.target_exact {
                self.best = chunks;
            }
            return;
        }
        let continuing = prev.map(|p| p + 1).filter(|&j| j < self.reference.len());
        let order = continuing
            .into_iter()
            .chain((0..self.reference.len()).filter(|&j| Some(j) != continuing));
        let options: Vec<usize> = order
            .filter(|&j| !self.used[j] && self.cand_stems[i] == self.ref_stems[j])
            .collect();
        for j in options {
            let is_exact = self.cand[i] == self.reference[j];
            let new_chunk = usize::from(continuing != Some(j));
            self.used[j] = true;
            self.dfs(i + 1, Some(j), chunks + new_chunk, matched + 1, exact + usize::from(is_exact));
            self.used[j] = false;
        }
        self.dfs(i + 1, None, chunks, matched, exact);
    }
}

/// Exact matches first, then stem matches over the leftovers, each stage
/// pairing leftmost available tokens. Returns per-candidate-position ref
/// indices.
fn greedy_alignment(cand: &[String], reference: &[String], cs: &[String], rs: &[String]) -> Vec<Option<usize>> {
    let mut used = vec![false; reference.len()];
    let mut align = vec![None; cand.len()];
    for (i, tok) in cand.iter().enumerate() {
        if let Some(j) = (0..reference.len()).find(|&j| !used[j] && reference[j] == *tok) {
            used[j] = true;
            align[i] = Some(j);
        }
    }
    for i in 0..cand.len() {
        if align[i].is_some() {
            continue;
        }
        if let Some(j) = (0..reference.len()).find(|&j| !used[j] && rs[j] == cs[i]) {
            used[j] = true;
            align[i] = Some(j);
        }
    }
    align
}

fn count_chunks(align: &[Option<usize>]) -> usize {
    let mut chunks = 0;
    let mut prev: Option<usize> = None;
    for a in align {
        match (*a, prev) {
            (Some(j), Some(p)) if j == p + 1 => {}
            (Some(_), _) => chunks += 1,
            _ => {}
        }
        prev = *a;
    }
    chunks
}

fn type_overlap<'a, I: Iterator<Item = &'a String>>(a: I, b: I) -> usize {
    let mut counts: HashMap<&String, (usize, usize)> = HashMap::new();
    for t in a {
        counts.entry(t).or_default().0 += 1;
    }
    for t in b {
        counts.entry(t).or_default().1 += 1;
    }
    counts.values().map(|&(x, y)| x.min(y)).sum()
}

/// Two-stage (exact, then stem) unigram alignment with the fewest chunks.
pub fn meteor_alignment(cand: &TokenSeq, reference: &TokenSeq) -> MeteorAlignment {
    let cs: Vec<String> = cand.tokens.iter().map(|t| stem(t)).collect();
    let rs: Vec<String> = reference.tokens.iter().map(|t| stem(t)).collect();
    let exact = type_overlap(cand.tokens.iter(), reference.tokens.iter());
    let matches = type_overlap(cs.iter(), rs.iter());
    let greedy = count_chunks(&greedy_alignment(&cand.tokens, &reference.tokens, &cs, &rs));
    let mut search = ChunkSearch {
        cand: &cand.tokens,
        reference: &reference.tokens,
        cand_stems: &cs,
        ref_stems: &rs,
        target_matches: matches,
        target_exact: exact,
        used: vec![false; reference.len()],
        best: greedy,
        nodes: 0,
    };
    if greedy > 1 {
        search.dfs(0, None, 0, 0, 0);
    }
    MeteorAlignment {
        matches,
        exact,
        chunks: search.best,
    }
}

/// METEOR with exact and stem matching, alpha = 0.9, beta = 3, gamma = 0.5.
pub fn meteor(cand: &TokenSeq, reference: &TokenSeq) -> Result<f64> {
    require_ref(reference)?;
    if cand.is_empty() {
        return Ok(0.0);
    }
    let a = meteor_alignment(cand, reference);
    if a.matches == 0 {
        return Ok(0.0);
    }
    let m = a.matches as f64;
    let p = m / cand.len() as f64;
    let r = m / reference.len() as f64;
    let f_mean = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r);
    let penalty = METEOR_GAMMA * (a.chunks as f64 / m).powf(METEOR_BETA);
    Ok(f_mean * (1.0 - penalty))
}

pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "dimension mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("cosine of a zero vector"));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Anything that maps a sentence to a fixed-size vector.
pub trait Embedder {
    fn embed(&self, text: &str) -> Vec<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoringKind {
    Cosine,
    Bleu,
    Rouge,
    Meteor,
}

impl fmt::Display for ScoringKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoringKind::Cosine => "cosine",
            ScoringKind::Bleu => "bleu",
            ScoringKind::Rouge => "rouge",
            ScoringKind::Meteor => "meteor",
        })
    }
}

impl FromStr for ScoringKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(ScoringKind::Cosine),
            "bleu" => Ok(ScoringKind::Bleu),
            "rouge" => Ok(ScoringKind::Rouge),
            "meteor" => Ok(ScoringKind::Meteor),
            other => Err(Error::invalid(format!("unknown scoring kind {other:?}"))),
        }
    }
}

/// The scoring function s(cand, ref).
pub fn score(kind: ScoringKind, cand: &str, reference: &str, embedder: Option<&dyn Embedder>) -> Result<f64> {
    match kind {
        ScoringKind::Cosine => {
            let e = embedder.ok_or(Error::MissingEmbedder)?;
            cosine_score(&e.embed(cand), &e.embed(reference))
        }
        ScoringKind::Bleu => sentence_bleu(&tokenize(cand), &tokenize(reference)),
        ScoringKind::Rouge => rouge_l(&tokenize(cand), &tokenize(reference)),
        ScoringKind::Meteor => meteor(&tokenize(cand), &tokenize(reference)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu: f64,
    pub rouge_l: f64,
    pub meteor: f64,
    pub n_examples: usize,
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "bleu={:.4} rouge_l={:.4} meteor={:.4} n={}",
            self.bleu, self.rouge_l, self.meteor, self.n_examples
        )
    }
}
