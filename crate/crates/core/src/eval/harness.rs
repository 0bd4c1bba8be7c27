//! Running rerankers over candidate sets, scoring the selections, and the
//! candidate-count and anchor sweeps.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::CandidateSet;
use crate::encoder::{train, LossKind, Mode, Model, TrainConfig};
use crate::error::{Error, Result};
use crate::metrics::{corpus_bleu, meteor, rouge_l, sentence_bleu, tokenize, Embedder, MetricReport, ScoringKind};
use crate::par_map;
use crate::rerank::{
    argmax, argmin, build_anchor_pool, rerank_classification, rerank_knn, response_hash, select_baseline, AnchorPool,
    Baseline, Method, RerankResult,
};
use crate::staging::{build_stage2, LabeledExample, Stage2Options};

/// A selection policy with whatever it needs to score candidates.
#[derive(Debug, Clone, Copy)]
pub enum Reranker<'a> {
    Classification { model: &'a Model, mode: Mode },
    Knn { model: &'a Model, pool: &'a AnchorPool, k: usize },
    Greedy,
    Random { seed: u64 },
    OracleMax,
    OracleMin,
}

impl Reranker<'_> {
    pub fn method(&self) -> Method {
        match self {
            Reranker::Classification { .. } => Method::Classification,
            Reranker::Knn { .. } => Method::Knn,
            Reranker::Greedy => Method::GreedyPassthrough,
            Reranker::Random { .. } => Method::Random,
            Reranker::OracleMax => Method::OracleMax,
            Reranker::OracleMin => Method::OracleMin,
        }
    }
}

/// One reranking decision as written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub context_id: String,
    pub method: Method,
    pub chosen_index: usize,
    pub chosen: String,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub context_id: String,
    pub chosen: String,
}

impl From<&SelectionRecord> for Selection {
    fn from(r: &SelectionRecord) -> Self {
        Selection {
            context_id: r.context_id.clone(),
            chosen: r.chosen.clone(),
        }
    }
}

/// The selections of one method over a test collection and their scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub method: String,
    pub selections: Vec<Selection>,
    pub report: MetricReport,
    pub wall_time_s: f64,
}

/// Picks the candidate with the highest (or lowest) sentence BLEU against gold.
pub fn oracle_select(cands: &[String], gold: &str, max: bool) -> Result<RerankResult> {
    if cands.is_empty() {
        return Err(Error::invalid("no candidates to rerank"));
    }
    let g = tokenize(gold);
    let scores = cands
        .iter()
        .map(|c| sentence_bleu(&tokenize(c), &g))
        .collect::<Result<Vec<_>>>()?;
    let (chosen_index, method) = if max {
        (argmax(&scores).expect("non-empty"), Method::OracleMax)
    } else {
        (argmin(&scores).expect("non-empty"), Method::OracleMin)
    };
    Ok(RerankResult {
        chosen_index,
        scores,
        method,
    })
}

/// Reranks one set. With `include_greedy` the greedy response competes as
/// candidate `j`; greedy passthrough always reports it there.
pub fn rerank_set(r: &Reranker, cs: &CandidateSet, include_greedy: bool) -> Result<SelectionRecord> {
    let cands = cs.inference_candidates(include_greedy);
    let res = match *r {
        Reranker::Classification { model, mode } => rerank_classification(model, mode, &cs.context, &cands)?,
        Reranker::Knn { model, pool, k } => rerank_knn(model, pool, &cs.context, &cands, k)?,
        Reranker::Greedy => select_baseline(cs, Baseline::GreedyPassthrough, 0),
        Reranker::Random { seed } => {
            let set_seed = seed.wrapping_add(response_hash(&cs.context.context_id));
            select_baseline(cs, Baseline::Random, set_seed)
        }
        Reranker::OracleMax => oracle_select(&cands, &cs.gold, true)?,
        Reranker::OracleMin => oracle_select(&cands, &cs.gold, false)?,
    };
    let chosen = match res.method {
        Method::GreedyPassthrough => cs.greedy.clone(),
        _ => cands[res.chosen_index].clone(),
    };
    Ok(SelectionRecord {
        context_id: cs.context.context_id.clone(),
        method: res.method,
        chosen_index: res.chosen_index,
        chosen,
        scores: res.scores,
    })
}

pub fn rerank_all(
    r: &Reranker,
    sets: &[CandidateSet],
    include_greedy: bool,
    threads: usize,
) -> Result<Vec<SelectionRecord>> {
    if sets.is_empty() {
        return Err(Error::invalid("no candidate sets"));
    }
    par_map(sets, threads, |cs| rerank_set(r, cs, include_greedy))
        .into_iter()
        .collect()
}

pub fn golds(sets: &[CandidateSet]) -> HashMap<String, String> {
    sets.iter()
        .map(|cs| (cs.context.context_id.clone(), cs.gold.clone()))
        .collect()
}

/// Corpus BLEU, mean ROUGE-L, and mean METEOR of `selections` against golds.
pub fn evaluate(selections: &[Selection], golds: &HashMap<String, String>, threads: usize) -> Result<MetricReport> {
    if selections.is_empty() {
        return Err(Error::invalid("no selections to evaluate"));
    }
    let pairs = selections
        .iter()
        .map(|s| {
            let gold = golds
                .get(&s.context_id)
                .ok_or_else(|| Error::NotFound(format!("gold for context {:?}", s.context_id)))?;
            Ok((tokenize(&s.chosen), tokenize(gold)))
        })
        .collect::<Result<Vec<_>>>()?;
    let per_pair = par_map(&pairs, threads, |(c, g)| -> Result<(f64, f64)> { Ok((rouge_l(c, g)?, meteor(c, g)?)) })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let n = pairs.len() as f64;
    Ok(MetricReport {
        bleu: corpus_bleu(pairs.iter().map(|(c, g)| (c, g)))?,
        rouge_l: per_pair.iter().map(|p| p.0).sum::<f64>() / n,
        meteor: per_pair.iter().map(|p| p.1).sum::<f64>() / n,
        n_examples: pairs.len(),
    })
}

/// Reranks and evaluates, timing the whole run.
pub fn run(
    r: &Reranker,
    sets: &[CandidateSet],
    include_greedy: bool,
    threads: usize,
) -> Result<(EvalRun, Vec<SelectionRecord>)> {
    let start = Instant::now();
    let records = rerank_all(r, sets, include_greedy, threads)?;
    let selections: Vec<Selection> = records.iter().map(Selection::from).collect();
    let report = evaluate(&selections, &golds(sets), threads)?;
    let run = EvalRun {
        method: r.method().name().to_string(),
        selections,
        report,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    Ok((run, records))
}

pub fn oracle_rerank(sets: &[CandidateSet], max: bool, include_greedy: bool, threads: usize) -> Result<EvalRun> {
    let r = if max { Reranker::OracleMax } else { Reranker::OracleMin };
    run(&r, sets, include_greedy, threads).map(|(run, _)| run)
}

/// Mean sentence BLEU of the chosen responses against gold.
pub fn mean_sentence_bleu(records: &[SelectionRecord], golds: &HashMap<String, String>) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::invalid("no selections"));
    }
    let mut total = 0.0;
    for r in records {
        let gold = golds
            .get(&r.context_id)
            .ok_or_else(|| Error::NotFound(format!("gold for context {:?}", r.context_id)))?;
        total += sentence_bleu(&tokenize(&r.chosen), &tokenize(gold))?;
    }
    Ok(total / records.len() as f64)
}

/// How Stage-2 data is rebuilt and a classifier retrained from candidate sets.
#[derive(Debug, Clone)]
pub struct Stage2Recipe<'a> {
    pub init: &'a Model,
    pub kind: ScoringKind,
    pub options: Stage2Options,
    pub config: TrainConfig,
    pub seed: u64,
}

impl Stage2Recipe<'_> {
    pub fn examples(&self, sets: &[CandidateSet]) -> Result<Vec<LabeledExample>> {
        let embedder = (self.kind == ScoringKind::Cosine).then_some(self.init as &dyn Embedder);
        build_stage2(sets, self.kind, self.seed, self.options, embedder)
    }

    pub fn fit(&self, sets: &[CandidateSet]) -> Result<Model> {
        let ex = self.examples(sets)?;
        if ex.is_empty() {
            return Err(Error::invalid("stage-2 construction produced no examples"));
        }
        train(self.init, &ex, &self.config, LossKind::Classification).map(|(m, _)| m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub count: usize,
    pub report: MetricReport,
    pub wall_time_s: f64,
}

fn check_counts(sets: &[CandidateSet], counts: &[usize]) -> Result<()> {
    let j = sets
        .iter()
        .map(CandidateSet::j)
        .min()
        .ok_or_else(|| Error::invalid("no candidate sets"))?;
    match counts.iter().find(|&&c| c == 0 || c > j) {
        Some(c) => Err(Error::invalid(format!("candidate count {c} outside 1..={j}"))),
        None if counts.is_empty() => Err(Error::invalid("no candidate counts")),
        None => Ok(()),
    }
}

/// Reranks with the first `count` candidates of each set, for each count.
pub fn sweep_candidates_inference(
    r: &Reranker,
    sets: &[CandidateSet],
    counts: &[usize],
    include_greedy: bool,
    threads: usize,
) -> Result<Vec<CurvePoint>> {
    check_counts(sets, counts)?;
    counts
        .iter()
        .map(|&count| {
            let start = Instant::now();
            let cut: Vec<_> = sets.iter().map(|cs| cs.truncated(count)).collect();
            let (run, _) = run(r, &cut, include_greedy, threads)?;
            Ok(CurvePoint {
                count,
                report: run.report,
                wall_time_s: start.elapsed().as_secs_f64(),
            })
        })
        .collect()
}

/// Rebuilds Stage-2 data from the first `count` candidates of each training
/// set, retrains, and evaluates on the full test sets.
pub fn sweep_candidates_training(
    recipe: &Stage2Recipe,
    train_sets: &[CandidateSet],
    test_sets: &[CandidateSet],
    counts: &[usize],
    include_greedy: bool,
    threads: usize,
) -> Result<Vec<CurvePoint>> {
    check_counts(train_sets, counts)?;
    counts
        .iter()
        .map(|&count| {
            let start = Instant::now();
            let cut: Vec<_> = train_sets.iter().map(|cs| cs.truncated(count)).collect();
            let model = recipe.fit(&cut)?;
            let r = Reranker::Classification {
                model: &model,
                mode: recipe.config.mode,
            };
            let (run, _) = run(&r, test_sets, include_greedy, threads)?;
            Ok(CurvePoint {
                count,
                report: run.report,
                wall_time_s: start.elapsed().as_secs_f64(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub pool: usize,
    pub k: usize,
    pub report: MetricReport,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedCell {
    pub pool: usize,
    pub k: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnGrid {
    pub cells: Vec<GridCell>,
    pub skipped: Vec<SkippedCell>,
}

/// KNN reranking over every (pool size, k) pair with a fixed encoder.
/// Cells with k above the pool size, or pools larger than the example set,
/// are skipped with a reason.
#[allow(clippy::too_many_arguments)]
pub fn sweep_knn(
    model: &Model,
    examples: &[LabeledExample],
    pools: &[usize],
    ks: &[usize],
    sets: &[CandidateSet],
    include_greedy: bool,
    seed: u64,
    threads: usize,
) -> Result<KnnGrid> {
    if pools.is_empty() || ks.is_empty() {
        return Err(Error::invalid("empty sweep grid"));
    }
    let mut grid = KnnGrid {
        cells: Vec::new(),
        skipped: Vec::new(),
    };
    for &pool_size in pools {
        if pool_size > examples.len() {
            for &k in ks {
                grid.skipped.push(SkippedCell {
                    pool: pool_size,
                    k,
                    reason: format!("pool size exceeds the {} available examples", examples.len()),
                });
            }
            continue;
        }
        let build_start = Instant::now();
        let pool = build_anchor_pool(model, examples, pool_size, seed)?;
        let build_time = build_start.elapsed().as_secs_f64();
        for &k in ks {
            if k == 0 || k > pool_size {
                grid.skipped.push(SkippedCell {
                    pool: pool_size,
                    k,
                    reason: format!("k must lie in 1..={pool_size}"),
                });
                continue;
            }
            let r = Reranker::Knn {
                model,
                pool: &pool,
                k,
            };
            let (run, _) = run(&r, sets, include_greedy, threads)?;
            grid.cells.push(GridCell {
                pool: pool_size,
                k,
                report: run.report,
                wall_time_s: build_time + run.wall_time_s,
            });
        }
    }
    Ok(grid)
}

fn metric_cols(out: &mut String, r: &MetricReport, wall: f64) {
    let _ = writeln!(out, "{:.6},{:.6},{:.6},{:.3}", r.bleu, r.rouge_l, r.meteor, wall);
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("count,bleu,rouge_l,meteor,wall_time_s\n");
    for p in points {
        let _ = write!(out, "{},", p.count);
        metric_cols(&mut out, &p.report, p.wall_time_s);
    }
    out
}

pub fn grid_csv(grid: &KnnGrid) -> String {
    let mut out = String::from("pool,k,bleu,rouge_l,meteor,wall_time_s\n");
    for c in &grid.cells {
        let _ = write!(out, "{},{},", c.pool, c.k);
        metric_cols(&mut out, &c.report, c.wall_time_s);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diversity {
    pub mean_unique: f64,
    /// Number of sets with each distinct-candidate count.
    pub histogram: BTreeMap<usize, usize>,
    pub n_sets: usize,
}

/// Distinct candidate strings per set.
pub fn diversity(sets: &[CandidateSet]) -> Result<Diversity> {
    if sets.is_empty() {
        return Err(Error::invalid("no candidate sets"));
    }
    let mut histogram = BTreeMap::new();
    let mut total = 0usize;
    for cs in sets {
        let mut c: Vec<&str> = cs.candidates.iter().map(String::as_str).collect();
        c.sort_unstable();
        c.dedup();
        total += c.len();
        *histogram.entry(c.len()).or_insert(0) += 1;
    }
    Ok(Diversity {
        mean_unique: total as f64 / sets.len() as f64,
        histogram,
        n_sets: sets.len(),
    })
}
