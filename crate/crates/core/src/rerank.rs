//! Inference-time selection among candidate responses using only the
//! dialogue context.

use std::cmp::Ordering;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CandidateSet, Context};
use crate::encoder::{Mode, Model};
use crate::error::{Error, Result};
use crate::seeded_rng;
use crate::staging::LabeledExample;

/// Redraws allowed when an anchor sample comes out single-labelled.
const ANCHOR_RETRIES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Classification,
    Knn,
    GreedyPassthrough,
    OracleMax,
    OracleMin,
    Random,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Classification => "classification",
            Method::Knn => "knn",
            Method::GreedyPassthrough => "greedy_passthrough",
            Method::OracleMax => "oracle_max",
            Method::OracleMin => "oracle_min",
            Method::Random => "random",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankResult {
    pub chosen_index: usize,
    pub scores: Vec<f64>,
    pub method: Method,
}

/// Index of the largest score; the lowest index wins ties.
pub fn argmax(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        if best.is_none_or(|b| *s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Index of the smallest score; the lowest index wins ties.
pub fn argmin(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        if best.is_none_or(|b| *s < scores[b]) {
            best = Some(i);
        }
    }
    best
}

fn require_candidates(cands: &[String]) -> Result<()> {
    if cands.is_empty() {
        Err(Error::invalid("no candidates to rerank"))
    } else {
        Ok(())
    }
}

/// Scores each candidate by P(l = 1 | c, r) and picks the most probable.
pub fn rerank_classification(model: &Model, mode: Mode, c: &Context, cands: &[String]) -> Result<RerankResult> {
    require_candidates(cands)?;
    let scores: Vec<f64> = cands.iter().map(|r| model.classify_with(mode, c, r)[1]).collect();
    Ok(RerankResult {
        chosen_index: argmax(&scores).expect("non-empty"),
        scores,
        method: Method::Classification,
    })
}

/// Encoded, labelled training pairs used as KNN references.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorPool {
    pub encodings: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
    /// `(context_id, response hash)` of each anchor.
    pub sources: Vec<(String, u64)>,
    norms: Vec<f64>,
}

impl AnchorPool {
    pub fn new(encodings: Vec<Vec<f64>>, labels: Vec<u8>, sources: Vec<(String, u64)>) -> Result<Self> {
        if encodings.is_empty() || encodings.len() != labels.len() || labels.len() != sources.len() {
            return Err(Error::invalid("anchor lists must be non-empty and of equal length"));
        }
        let norms = encodings.iter().map(|e| norm(e)).collect();
        Ok(AnchorPool {
            encodings,
            labels,
            sources,
            norms,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn positive_fraction(&self) -> f64 {
        self.labels.iter().filter(|&&l| l == 1).count() as f64 / self.len() as f64
    }

    /// The `k` anchors most cosine-similar to `e`, most similar first; equal
    /// similarities keep anchor order.
    pub fn nearest(&self, e: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
        if k == 0 || k > self.len() {
            return Err(Error::invalid(format!("k = {k} outside 1..={}", self.len())));
        }
        let qn = norm(e);
        let mut sims: Vec<(usize, f64)> = self
            .encodings
            .iter()
            .zip(&self.norms)
            .enumerate()
            .map(|(i, (a, &an))| {
                let dot: f64 = a.iter().zip(e).map(|(x, y)| x * y).sum();
                let sim = if an == 0.0 || qn == 0.0 { 0.0 } else { dot / (an * qn) };
                (i, sim)
            })
            .collect();
        let order = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
        if k < sims.len() {
            sims.select_nth_unstable_by(k - 1, order);
            sims.truncate(k);
        }
        sims.sort_by(order);
        Ok(sims)
    }

    /// The pool with every anchor repeated `times` times in a row.
    pub fn replicated(&self, times: usize) -> AnchorPool {
        let rep = |n: usize| (0..n).flat_map(|i| std::iter::repeat_n(i, times));
        AnchorPool {
            encodings: rep(self.len()).map(|i| self.encodings[i].clone()).collect(),
            labels: rep(self.len()).map(|i| self.labels[i]).collect(),
            sources: rep(self.len()).map(|i| self.sources[i].clone()).collect(),
            norms: rep(self.len()).map(|i| self.norms[i]).collect(),
        }
    }
}

fn norm(e: &[f64]) -> f64 {
    e.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// 64-bit FNV-1a, used to identify anchor responses without storing them.
pub fn response_hash(text: &str) -> u64 {
    text.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Draws `n_anchors` examples uniformly without replacement and encodes
/// them. Redraws a bounded number of times if the sample lacks a label.
pub fn build_anchor_pool(model: &Model, examples: &[LabeledExample], n_anchors: usize, seed: u64) -> Result<AnchorPool> {
    if n_anchors == 0 || n_anchors > examples.len() {
        return Err(Error::invalid(format!(
            "cannot draw {n_anchors} anchors from {} examples",
            examples.len()
        )));
    }
    let mut rng = seeded_rng(seed, 3);
    let mut picked = None;
    for _ in 0..ANCHOR_RETRIES {
        let idx = sample(&mut rng, examples.len(), n_anchors).into_vec();
        let pos = idx.iter().filter(|&&i| examples[i].label == 1).count();
        if pos > 0 && pos < idx.len() {
            picked = Some(idx);
            break;
        }
    }
    let idx = picked.ok_or_else(|| {
        Error::invalid(format!(
            "no two-label anchor sample of size {n_anchors} after {ANCHOR_RETRIES} draws"
        ))
    })?;
    let encodings = idx
        .iter()
        .map(|&i| model.encode_pair(&examples[i].context, &examples[i].response))
        .collect();
    let labels = idx.iter().map(|&i| examples[i].label).collect();
    let sources = idx
        .iter()
        .map(|&i| (examples[i].context.context_id.clone(), response_hash(&examples[i].response)))
        .collect();
    AnchorPool::new(encodings, labels, sources)
}

/// Fraction of positively labelled anchors among the `k` nearest.
pub fn knn_score(pool: &AnchorPool, e: &[f64], k: usize) -> Result<f64> {
    let nn = pool.nearest(e, k)?;
    Ok(nn.iter().filter(|(i, _)| pool.labels[*i] == 1).count() as f64 / k as f64)
}

/// KNN score plus the mean similarity to the positive neighbours, which
/// breaks ties between equal scores.
fn knn_score_with_tiebreak(pool: &AnchorPool, e: &[f64], k: usize) -> Result<(f64, f64)> {
    let nn = pool.nearest(e, k)?;
    let pos: Vec<f64> = nn.iter().filter(|(i, _)| pool.labels[*i] == 1).map(|(_, s)| *s).collect();
    let mean_sim = if pos.is_empty() {
        f64::NEG_INFINITY
    } else {
        pos.iter().sum::<f64>() / pos.len() as f64
    };
    Ok((pos.len() as f64 / k as f64, mean_sim))
}

pub fn rerank_knn(model: &Model, pool: &AnchorPool, c: &Context, cands: &[String], k: usize) -> Result<RerankResult> {
    require_candidates(cands)?;
    let scored = cands
        .iter()
        .map(|r| knn_score_with_tiebreak(pool, &model.encode_pair(c, r), k))
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (i, s) in scored.iter().enumerate().skip(1) {
        let b = &scored[best];
        let better = match s.0.total_cmp(&b.0) {
            Ordering::Greater => true,
            Ordering::Equal => s.1 > b.1,
            Ordering::Less => false,
        };
        if better {
            best = i;
        }
    }
    Ok(RerankResult {
        chosen_index: best,
        scores: scored.into_iter().map(|s| s.0).collect(),
        method: Method::Knn,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    GreedyPassthrough,
    Random,
}

/// Greedy passthrough selects the greedy response, reported at index `j` of
/// the candidates-plus-greedy list. Random picks a sampled candidate
/// uniformly.
pub fn select_baseline(cs: &CandidateSet, method: Baseline, seed: u64) -> RerankResult {
    match method {
        Baseline::GreedyPassthrough => {
            let mut scores = vec![0.0; cs.j() + 1];
            scores[cs.j()] = 1.0;
            RerankResult {
                chosen_index: cs.j(),
                scores,
                method: Method::GreedyPassthrough,
            }
        }
        Baseline::Random => {
            let pick = seeded_rng(seed, 4).gen_range(0..cs.j());
            let mut scores = vec![0.0; cs.j()];
            scores[pick] = 1.0;
            RerankResult {
                chosen_index: pick,
                scores,
                method: Method::Random,
            }
        }
    }
}
