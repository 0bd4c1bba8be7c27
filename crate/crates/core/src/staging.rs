//! Training data for both stages: gold-vs-random response selection
//! examples, and self-generated examples split around the greedy response's
//! score.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CandidateSet, Context, Utterance};
use crate::error::{Error, Result};
use crate::io::read_jsonl;
use crate::metrics::{score, Embedder, ScoringKind};
use crate::seeded_rng;

/// Negatives per gold response in the reference response-selection setup.
pub const DEFAULT_NEGATIVES: usize = 19;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Gold,
    RandomNegative,
    SelfGenerated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub context: Context,
    pub response: String,
    pub label: u8,
    pub origin: Origin,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabeledExampleRecord {
    pub context_id: String,
    pub context: Vec<Utterance>,
    pub response: String,
    pub label: u8,
    pub origin: Origin,
}

impl From<&LabeledExample> for LabeledExampleRecord {
    fn from(e: &LabeledExample) -> Self {
        LabeledExampleRecord {
            context_id: e.context.context_id.clone(),
            context: e.context.utterances.clone(),
            response: e.response.clone(),
            label: e.label,
            origin: e.origin,
        }
    }
}

impl TryFrom<LabeledExampleRecord> for LabeledExample {
    type Error = String;

    fn try_from(r: LabeledExampleRecord) -> Result<Self, String> {
        if r.label > 1 {
            return Err(format!("label {} is not 0 or 1", r.label));
        }
        if r.origin == Origin::Gold && r.label != 1 {
            return Err("gold examples must be labelled 1".into());
        }
        Ok(LabeledExample {
            context: Context::from_utterances(r.context_id, r.context),
            response: r.response,
            label: r.label,
            origin: r.origin,
        })
    }
}

pub fn load_examples(path: &Path) -> Result<Vec<LabeledExample>> {
    read_jsonl::<LabeledExampleRecord>(path)?
        .into_iter()
        .map(|(line, rec)| {
            LabeledExample::try_from(rec).map_err(|message| Error::Parse {
                path: path.to_path_buf(),
                line,
                message,
            })
        })
        .collect()
}

pub fn to_records(examples: &[LabeledExample]) -> Vec<LabeledExampleRecord> {
    examples.iter().map(LabeledExampleRecord::from).collect()
}

/// One positive `(c_i, r_i, 1)` and `n_neg` negatives `(c_i, r_j, 0)` per
/// entry, with the `j != i` drawn uniformly without replacement.
pub fn build_stage1(corpus: &[(Context, String)], n_neg: usize, seed: u64) -> Result<Vec<LabeledExample>> {
    if n_neg == 0 {
        return Err(Error::invalid("n_neg must be at least 1"));
    }
    if corpus.len() < n_neg + 1 {
        return Err(Error::invalid(format!(
            "{} entries cannot supply {n_neg} distinct negatives each",
            corpus.len()
        )));
    }
    let mut rng = seeded_rng(seed, 1);
    let mut out = Vec::with_capacity(corpus.len() * (n_neg + 1));
    for (i, (ctx, gold)) in corpus.iter().enumerate() {
        out.push(LabeledExample {
            context: ctx.clone(),
            response: gold.clone(),
            label: 1,
            origin: Origin::Gold,
        });
        for k in sample(&mut rng, corpus.len() - 1, n_neg) {
            let j = if k < i { k } else { k + 1 };
            out.push(LabeledExample {
                context: ctx.clone(),
                response: corpus[j].1.clone(),
                label: 0,
                origin: Origin::RandomNegative,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    /// `(candidate index, score against gold)` for every candidate.
    pub candidate_scores: Vec<(usize, f64)>,
    /// Score of the greedy response against gold.
    pub threshold: f64,
    pub high: Vec<usize>,
    pub low: Vec<usize>,
}

impl Partition {
    /// Splits by `score >= threshold` (high) versus `score < threshold`.
    pub fn from_scores(scores: &[f64], threshold: f64) -> Self {
        let (high, low) = (0..scores.len()).partition(|&i| scores[i] >= threshold);
        Partition {
            candidate_scores: scores.iter().copied().enumerate().collect(),
            threshold,
            high,
            low,
        }
    }

    pub fn score_of(&self, idx: usize) -> f64 {
        self.candidate_scores[idx].1
    }
}

pub fn partition(cs: &CandidateSet, kind: ScoringKind, embedder: Option<&dyn Embedder>) -> Result<Partition> {
    if cs.gold.trim().is_empty() {
        return Err(Error::invalid("gold response is empty"));
    }
    let threshold = score(kind, &cs.greedy, &cs.gold, embedder)?;
    let scores = cs
        .candidates
        .iter()
        .map(|r| score(kind, r, &cs.gold, embedder))
        .collect::<Result<Vec<_>>>()?;
    Ok(Partition::from_scores(&scores, threshold))
}

/// Subsamples the larger side to the size of the smaller one. A partition
/// with an empty side comes back with both sides empty.
pub fn downsample(part: &Partition, seed: u64) -> Partition {
    let target = part.high.len().min(part.low.len());
    let mut rng = seeded_rng(seed, 2);
    let mut shrink = |side: &[usize]| -> Vec<usize> {
        if side.len() == target {
            return side.to_vec();
        }
        let mut kept: Vec<usize> = sample(&mut rng, side.len(), target)
            .into_iter()
            .map(|k| side[k])
            .collect();
        kept.sort_unstable();
        kept
    };
    Partition {
        candidate_scores: part.candidate_scores.clone(),
        threshold: part.threshold,
        high: shrink(&part.high),
        low: shrink(&part.low),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage2Options {
    /// Downsample each set to equal high/low counts.
    pub balance: bool,
    /// Emit every high candidate as a positive, rather than only the
    /// best-scoring one.
    pub multiple_positives: bool,
    /// Use high candidates as positives; when off, the gold response is the
    /// single positive and only low candidates are negatives.
    pub self_generated_positives: bool,
}

impl Default for Stage2Options {
    fn default() -> Self {
        Stage2Options {
            balance: true,
            multiple_positives: true,
            self_generated_positives: true,
        }
    }
}

/// Stage-2 examples: per set, high candidates labelled 1 and low candidates
/// labelled 0. Repeated responses are dropped before balancing.
pub fn build_stage2(
    sets: &[CandidateSet],
    kind: ScoringKind,
    seed: u64,
    opts: Stage2Options,
    embedder: Option<&dyn Embedder>,
) -> Result<Vec<LabeledExample>> {
    if sets.is_empty() {
        return Err(Error::invalid("no candidate sets"));
    }
    let mut seen: HashSet<(String, String, u8)> = HashSet::new();
    let mut out = Vec::new();
    for (s, cs) in sets.iter().enumerate() {
        let part = partition(cs, kind, embedder)?;
        let ctx_id = &cs.context.context_id;
        let mut keep_unique = |side: &[usize], label: u8| -> Vec<usize> {
            side.iter()
                .copied()
                .filter(|&i| seen.insert((ctx_id.clone(), cs.candidates[i].clone(), label)))
                .collect()
        };
        let mut high = if opts.self_generated_positives {
            keep_unique(&part.high, 1)
        } else {
            Vec::new()
        };
        let low = keep_unique(&part.low, 0);
        if !opts.multiple_positives {
            // best score, lowest index on ties
            high = high
                .iter()
                .copied()
                .fold(None, |best: Option<usize>, i| match best {
                    Some(b) if part.score_of(b) >= part.score_of(i) => Some(b),
                    _ => Some(i),
                })
                .into_iter()
                .collect();
        }
        let mut part = Partition { high, low, ..part };
        let set_seed: u64 = seeded_rng(seed, s as u64 + 1).gen();
        if !opts.self_generated_positives {
            // gold is the one positive
            if opts.balance && part.low.len() > 1 {
                let pick = seeded_rng(set_seed, 2).gen_range(0..part.low.len());
                part.low = vec![part.low[pick]];
            }
            if !part.low.is_empty() && seen.insert((ctx_id.clone(), cs.gold.clone(), 1)) {
                out.push(LabeledExample {
                    context: cs.context.clone(),
                    response: cs.gold.clone(),
                    label: 1,
                    origin: Origin::Gold,
                });
            }
        } else if opts.balance {
            part = downsample(&part, set_seed);
        }
        for (side, label) in [(&part.high, 1u8), (&part.low, 0u8)] {
            for &i in side.iter() {
                out.push(LabeledExample {
                    context: cs.context.clone(),
                    response: cs.candidates[i].clone(),
                    label,
                    origin: Origin::SelfGenerated,
                });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Speaker;
    use proptest::prelude::*;

    fn ctx(id: &str) -> Context {
        Context::from_utterances(id, vec![Utterance::new(Speaker::User, format!("hello {id}"))])
    }

    fn corpus(n: usize) -> Vec<(Context, String)> {
        (0..n).map(|i| (ctx(&format!("c{i}")), format!("gold {i}"))).collect()
    }

    #[test]
    fn stage1_sizes_and_constraints() {
        let ex = build_stage1(&corpus(100), 19, 1).unwrap();
        assert_eq!(ex.len(), 2000);
        assert_eq!(ex.iter().filter(|e| e.label == 1).count(), 100);
        for chunk in ex.chunks(20) {
            let own = &chunk[0].response;
            assert_eq!(chunk[0].origin, Origin::Gold);
            let negs: HashSet<_> = chunk[1..].iter().map(|e| &e.response).collect();
            assert_eq!(negs.len(), 19);
            assert!(!negs.contains(own));
            assert!(chunk[1..].iter().all(|e| e.label == 0 && e.origin == Origin::RandomNegative));
        }
        assert_eq!(ex, build_stage1(&corpus(100), 19, 1).unwrap());
    }

    #[test]
    fn stage1_two_entries() {
        let ex = build_stage1(&corpus(2), 1, 0).unwrap();
        assert_eq!(ex[1].response, "gold 1");
        assert_eq!(ex[3].response, "gold 0");
        assert!(build_stage1(&corpus(2), 2, 0).is_err());
        assert!(build_stage1(&corpus(2), 0, 0).is_err());
    }

    #[test]
    fn threshold_rule() {
        let p = Partition::from_scores(&[0.9, 0.5, 0.7], 0.6);
        assert_eq!(p.high, vec![0, 2]);
        assert_eq!(p.low, vec![1]);
        let p = Partition::from_scores(&[0.6, 0.59], 0.6);
        assert_eq!(p.high, vec![0]);
    }

    fn set(gold: &str, greedy: &str, cands: &[&str]) -> CandidateSet {
        CandidateSet {
            context: ctx("s"),
            gold: gold.into(),
            greedy: greedy.into(),
            candidates: cands.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn greedy_equal_to_gold() {
        let cs = set("a b c d", "a b c d", &["a b c d", "a b x d", "a b c d", "q"]);
        let p = partition(&cs, ScoringKind::Bleu, None).unwrap();
        assert_eq!(p.threshold, 1.0);
        assert_eq!(p.high, vec![0, 2]);
        assert_eq!(p.low, vec![1, 3]);
    }

    #[test]
    fn downsample_cases() {
        let p = Partition::from_scores(&[1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0], 0.5);
        let d = downsample(&p, 3);
        assert_eq!((d.high.len(), d.low.len()), (3, 3));
        assert!(d.high.iter().all(|i| p.high.contains(i)));
        assert_eq!(d, downsample(&p, 3));

        let even = Partition::from_scores(&[1.0, 0.0], 0.5);
        assert_eq!(downsample(&even, 1), even);

        let lopsided = Partition::from_scores(&[1.0, 1.0], 0.5);
        let d = downsample(&lopsided, 1);
        assert!(d.high.is_empty() && d.low.is_empty());
    }

    #[test]
    fn all_candidates_equal_greedy() {
        let cs = set("a b c", "a b x", &["a b x", "a b x", "a b x"]);
        let bal = build_stage2(std::slice::from_ref(&cs), ScoringKind::Bleu, 0, Stage2Options::default(), None).unwrap();
        assert!(bal.is_empty());
        let unbalanced = Stage2Options {
            balance: false,
            ..Stage2Options::default()
        };
        let cs = set("a b c", "a b x", &["a b x", "a x c", "x b c"]);
        let ex = build_stage2(&[cs], ScoringKind::Rouge, 0, unbalanced, None).unwrap();
        assert_eq!(ex.len(), 3);
        assert!(ex.iter().all(|e| e.label == 1 && e.origin == Origin::SelfGenerated));
    }

    #[test]
    fn duplicates_are_dropped() {
        let cs = set("a b c d", "a b c x", &["a b c d", "a b c d", "q r", "q r", "q s"]);
        let opts = Stage2Options {
            balance: false,
            ..Stage2Options::default()
        };
        let ex = build_stage2(&[cs], ScoringKind::Bleu, 0, opts, None).unwrap();
        let responses: Vec<_> = ex.iter().map(|e| e.response.as_str()).collect();
        assert_eq!(responses, ["a b c d", "q r", "q s"]);
    }

    #[test]
    fn single_positive_and_gold_positive_ablations() {
        let cs = set("a b c d", "a b x y", &["a b c d", "a b c y", "q", "r", "s"]);
        let one = Stage2Options {
            multiple_positives: false,
            ..Stage2Options::default()
        };
        let ex = build_stage2(std::slice::from_ref(&cs), ScoringKind::Bleu, 0, one, None).unwrap();
        let pos: Vec<_> = ex.iter().filter(|e| e.label == 1).map(|e| e.response.as_str()).collect();
        assert_eq!(pos, ["a b c d"]);
        assert_eq!(ex.len(), 2);

        let gold = Stage2Options {
            self_generated_positives: false,
            ..Stage2Options::default()
        };
        let ex = build_stage2(&[cs], ScoringKind::Bleu, 0, gold, None).unwrap();
        assert_eq!(ex.len(), 2);
        assert_eq!(ex[0].origin, Origin::Gold);
        assert_eq!(ex[0].response, "a b c d");
        assert_eq!(ex[1].label, 0);
    }

    #[test]
    fn record_validation() {
        let rec = LabeledExampleRecord {
            context_id: "c".into(),
            context: vec![],
            response: "r".into(),
            label: 0,
            origin: Origin::Gold,
        };
        assert!(LabeledExample::try_from(rec.clone()).is_err());
        assert!(LabeledExample::try_from(LabeledExampleRecord { label: 2, ..rec.clone() }).is_err());
        assert!(LabeledExample::try_from(LabeledExampleRecord { label: 1, ..rec }).is_ok());
    }

    proptest! {
        #[test]
        fn partition_is_exact_cover(scores in proptest::collection::vec(0.0f64..1.0, 0..30), t in 0.0f64..1.0, seed: u64) {
            let p = Partition::from_scores(&scores, t);
            let mut all: Vec<usize> = p.high.iter().chain(&p.low).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..scores.len()).collect::<Vec<_>>());
            prop_assert!(p.high.iter().all(|&i| scores[i] >= t));
            prop_assert!(p.low.iter().all(|&i| scores[i] < t));
            let d = downsample(&p, seed);
            prop_assert_eq!(d.high.len(), d.low.len());
            prop_assert!(d.high.iter().all(|i| p.high.contains(i)));
            prop_assert!(d.low.iter().all(|i| p.low.contains(i)));
        }
    }
}
