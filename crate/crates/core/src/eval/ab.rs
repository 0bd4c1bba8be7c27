//! Blind pairwise preference tasks, the judgment log, and its statistics.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Context, Utterance};
use crate::error::{Error, Result};
use crate::eval::harness::EvalRun;
use crate::eval::stats::{binomial_test_two_sided, fleiss_kappa};
use crate::io::read_jsonl;
use crate::seeded_rng;

pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemResponse {
    pub system: String,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ABTask {
    pub task_id: String,
    pub context: Context,
    pub left: SystemResponse,
    pub right: SystemResponse,
    /// Whether the second system of the pair was put on the left.
    pub swapped: bool,
}

impl ABTask {
    /// Systems of the pair in canonical (sorted) order.
    pub fn pair(&self) -> (&str, &str) {
        let (a, b) = (self.left.system.as_str(), self.right.system.as_str());
        if a <= b {
            (a, b)
        } else {
            (b, a)
        }
    }

    pub fn system_for(&self, choice: Choice) -> &str {
        match choice {
            Choice::Left => &self.left.system,
            Choice::Right => &self.right.system,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ABTaskRecord {
    pub task_id: String,
    pub context_id: String,
    pub context: Vec<Utterance>,
    pub left: SystemResponse,
    pub right: SystemResponse,
    pub swapped: bool,
}

impl From<&ABTask> for ABTaskRecord {
    fn from(t: &ABTask) -> Self {
        ABTaskRecord {
            task_id: t.task_id.clone(),
            context_id: t.context.context_id.clone(),
            context: t.context.utterances.clone(),
            left: t.left.clone(),
            right: t.right.clone(),
            swapped: t.swapped,
        }
    }
}

impl TryFrom<ABTaskRecord> for ABTask {
    type Error = String;

    fn try_from(r: ABTaskRecord) -> Result<Self, String> {
        if r.left.system == r.right.system {
            return Err(format!("task {} compares {} with itself", r.task_id, r.left.system));
        }
        Ok(ABTask {
            task_id: r.task_id,
            context: Context::from_utterances(r.context_id, r.context),
            left: r.left,
            right: r.right,
            swapped: r.swapped,
        })
    }
}

pub fn load_tasks(path: &Path) -> Result<Vec<ABTask>> {
    let mut ids = HashSet::new();
    read_jsonl::<ABTaskRecord>(path)?
        .into_iter()
        .map(|(line, rec)| {
            if !ids.insert(rec.task_id.clone()) {
                return Err(Error::DuplicateId(rec.task_id));
            }
            ABTask::try_from(rec).map_err(|message| Error::Parse {
                path: path.to_path_buf(),
                line,
                message,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Choice {
    #[serde(alias = "a")]
    Left,
    #[serde(alias = "b")]
    Right,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ABJudgment {
    pub task_id: String,
    pub evaluator_id: String,
    pub choice: Choice,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

/// Pairs every two runs over contexts they all share. Tasks are spread
/// evenly over the system pairs, contexts are drawn without replacement per
/// pair, and each task puts the systems on random sides.
pub fn ab_build_tasks(
    runs: &[EvalRun],
    contexts: &HashMap<String, Context>,
    n_tasks: usize,
    seed: u64,
) -> Result<Vec<ABTask>> {
    if runs.len() < 2 {
        return Err(Error::invalid("need at least two runs"));
    }
    let names: HashSet<&str> = runs.iter().map(|r| r.method.as_str()).collect();
    if names.len() != runs.len() {
        return Err(Error::invalid("run method names must be distinct"));
    }
    let lookups: Vec<HashMap<&str, &str>> = runs
        .iter()
        .map(|r| {
            r.selections
                .iter()
                .map(|s| (s.context_id.as_str(), s.chosen.as_str()))
                .collect()
        })
        .collect();
    let shared: Vec<&str> = runs[0]
        .selections
        .iter()
        .map(|s| s.context_id.as_str())
        .filter(|id| lookups.iter().all(|l| l.contains_key(id)) && contexts.contains_key(*id))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if shared.is_empty() {
        return Err(Error::invalid("runs share no contexts"));
    }
    let pairs: Vec<(usize, usize)> = (0..runs.len())
        .flat_map(|a| (a + 1..runs.len()).map(move |b| (a, b)))
        .collect();
    let per_pair_max = shared.len();
    if n_tasks == 0 || n_tasks > per_pair_max * pairs.len() {
        return Err(Error::invalid(format!(
            "cannot build {n_tasks} tasks from {} shared contexts and {} system pairs",
            shared.len(),
            pairs.len()
        )));
    }
    let mut rng = seeded_rng(seed, 6);
    // spread the tasks evenly, topping up pairs with spare contexts
    let mut quota: Vec<usize> = (0..pairs.len())
        .map(|p| n_tasks / pairs.len() + usize::from(p < n_tasks % pairs.len()))
        .collect();
    let mut excess: usize = quota.iter().map(|&q| q.saturating_sub(per_pair_max)).sum();
    for q in quota.iter_mut() {
        *q = (*q).min(per_pair_max);
    }
    for q in quota.iter_mut() {
        let add = excess.min(per_pair_max - *q);
        *q += add;
        excess -= add;
    }
    let mut tasks = Vec::with_capacity(n_tasks);
    for (&(a, b), &q) in pairs.iter().zip(&quota) {
        for idx in sample(&mut rng, shared.len(), q).into_vec() {
            let id = shared[idx];
            let first = SystemResponse {
                system: runs[a].method.clone(),
                response: lookups[a][id].to_string(),
            };
            let second = SystemResponse {
                system: runs[b].method.clone(),
                response: lookups[b][id].to_string(),
            };
            let swapped = rng.gen_bool(0.5);
            let (left, right) = if swapped { (second, first) } else { (first, second) };
            tasks.push(ABTask {
                task_id: String::new(),
                context: contexts[id].clone(),
                left,
                right,
                swapped,
            });
        }
    }
    tasks.shuffle(&mut rng);
    for (i, t) in tasks.iter_mut().enumerate() {
        t.task_id = format!("t{i:04}");
    }
    Ok(tasks)
}

/// Append-only judgment log with at most one judgment per (task, evaluator).
#[derive(Debug)]
pub struct JudgmentLog {
    path: Option<PathBuf>,
    judgments: Vec<ABJudgment>,
    seen: HashSet<(String, String)>,
}

impl JudgmentLog {
    pub fn in_memory() -> Self {
        JudgmentLog {
            path: None,
            judgments: Vec::new(),
            seen: HashSet::new(),
        }
    }

    /// Opens `path`, replaying any judgments already in it.
    pub fn open(path: &Path) -> Result<Self> {
        let mut log = JudgmentLog {
            path: Some(path.to_path_buf()),
            ..JudgmentLog::in_memory()
        };
        if path.exists() {
            for (line, j) in read_jsonl::<ABJudgment>(path)? {
                if !log.seen.insert((j.task_id.clone(), j.evaluator_id.clone())) {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line,
                        message: "duplicate judgment".into(),
                    });
                }
                log.judgments.push(j);
            }
        }
        Ok(log)
    }

    pub fn judgments(&self) -> &[ABJudgment] {
        &self.judgments
    }

    pub fn has(&self, task_id: &str, evaluator_id: &str) -> bool {
        self.seen.contains(&(task_id.to_string(), evaluator_id.to_string()))
    }

    pub fn append(&mut self, j: ABJudgment) -> Result<()> {
        let key = (j.task_id.clone(), j.evaluator_id.clone());
        if self.seen.contains(&key) {
            return Err(Error::Conflict(format!(
                "evaluator {:?} already judged task {:?}",
                j.evaluator_id, j.task_id
            )));
        }
        if let Some(path) = &self.path {
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            let mut line = serde_json::to_string(&j)?;
            line.push('\n');
            f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
            f.flush().map_err(|e| Error::io(path, e))?;
        }
        self.seen.insert(key);
        self.judgments.push(j);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairStats {
    pub system_a: String,
    pub system_b: String,
    pub wins_a: u64,
    pub wins_b: u64,
    pub total: u64,
    pub pct_a: f64,
    pub pct_b: f64,
    pub p_value: Option<f64>,
    pub significant: bool,
    /// Agreement over tasks judged by every evaluator of this pair.
    pub kappa: Option<f64>,
    pub kappa_tasks: usize,
    pub evaluators: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ABStats {
    pub pairs: Vec<PairStats>,
    pub n_judgments: usize,
}

/// Task id to evaluator id to preferred system.
type TaskVotes<'a> = BTreeMap<&'a str, BTreeMap<&'a str, &'a str>>;

/// Preference counts, binomial test, and Fleiss' kappa per system pair.
/// Judgments on unknown tasks are an error.
pub fn ab_stats(tasks: &[ABTask], judgments: &[ABJudgment]) -> Result<ABStats> {
    let by_id: HashMap<&str, &ABTask> = tasks.iter().map(|t| (t.task_id.as_str(), t)).collect();
    // pair -> task -> evaluator -> preferred system
    let mut grouped: BTreeMap<(&str, &str), TaskVotes> = BTreeMap::new();
    for t in tasks {
        grouped.entry(t.pair()).or_default();
    }
    for j in judgments {
        let t = by_id
            .get(j.task_id.as_str())
            .ok_or_else(|| Error::NotFound(format!("task {:?}", j.task_id)))?;
        grouped
            .entry(t.pair())
            .or_default()
            .entry(t.task_id.as_str())
            .or_default()
            .insert(j.evaluator_id.as_str(), t.system_for(j.choice));
    }
    let mut pairs = Vec::new();
    for ((a, b), per_task) in grouped {
        let mut wins_a = 0u64;
        let mut wins_b = 0u64;
        let mut evaluators: BTreeSet<&str> = BTreeSet::new();
        for votes in per_task.values() {
            for (&ev, &sys) in votes {
                evaluators.insert(ev);
                if sys == a {
                    wins_a += 1;
                } else {
                    wins_b += 1;
                }
            }
        }
        let total = wins_a + wins_b;
        let common: Vec<Vec<u64>> = per_task
            .values()
            .filter(|votes| votes.len() == evaluators.len())
            .map(|votes| {
                let for_a = votes.values().filter(|&&s| s == a).count() as u64;
                vec![for_a, votes.len() as u64 - for_a]
            })
            .collect();
        let kappa = if evaluators.len() >= 2 && !common.is_empty() {
            Some(fleiss_kappa(&common)?)
        } else {
            None
        };
        let p_value = if total > 0 {
            Some(binomial_test_two_sided(wins_a, total)?)
        } else {
            None
        };
        let pct = |w: u64| if total > 0 { 100.0 * w as f64 / total as f64 } else { 0.0 };
        pairs.push(PairStats {
            system_a: a.to_string(),
            system_b: b.to_string(),
            wins_a,
            wins_b,
            total,
            pct_a: pct(wins_a),
            pct_b: pct(wins_b),
            p_value,
            significant: p_value.is_some_and(|p| p < SIGNIFICANCE_LEVEL),
            kappa,
            kappa_tasks: if kappa.is_some() { common.len() } else { 0 },
            evaluators: evaluators.len(),
        });
    }
    Ok(ABStats {
        pairs,
        n_judgments: judgments.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Speaker;
    use crate::eval::harness::Selection;
    use crate::metrics::MetricReport;

    fn run(name: &str, ids: &[&str]) -> EvalRun {
        EvalRun {
            method: name.into(),
            selections: ids
                .iter()
                .map(|id| Selection {
                    context_id: id.to_string(),
                    chosen: format!("{name} says {id}"),
                })
                .collect(),
            report: MetricReport {
                bleu: 0.0,
                rouge_l: 0.0,
                meteor: 0.0,
                n_examples: ids.len(),
            },
            wall_time_s: 0.0,
        }
    }

    fn contexts(n: usize) -> (Vec<String>, HashMap<String, Context>) {
        let ids: Vec<String> = (0..n).map(|i| format!("c{i}")).collect();
        let map = ids
            .iter()
            .map(|id| {
                (
                    id.clone(),
                    Context::from_utterances(id.clone(), vec![Utterance::new(Speaker::User, "hello")]),
                )
            })
            .collect();
        (ids, map)
    }

    #[test]
    fn two_runs_hundred_tasks() {
        let (ids, ctx) = contexts(100);
        let ids: Vec<&str> = ids.iter().map(String::as_str).collect();
        let runs = [run("x", &ids), run("y", &ids)];
        let tasks = ab_build_tasks(&runs, &ctx, 100, 1).unwrap();
        assert_eq!(tasks.len(), 100);
        let swapped = tasks.iter().filter(|t| t.swapped).count();
        assert!((30..=70).contains(&swapped), "{swapped}");
        assert!(tasks.iter().all(|t| t.left.system != t.right.system));
        let mut used: Vec<_> = tasks.iter().map(|t| t.context.context_id.clone()).collect();
        used.sort();
        used.dedup();
        assert_eq!(used.len(), 100);
        assert_eq!(tasks, ab_build_tasks(&runs, &ctx, 100, 1).unwrap());
        assert!(ab_build_tasks(&runs, &ctx, 101, 1).is_err());
    }

    #[test]
    fn three_runs_cover_all_pairs() {
        let (ids, ctx) = contexts(10);
        let ids: Vec<&str> = ids.iter().map(String::as_str).collect();
        let runs = [run("a", &ids), run("b", &ids), run("c", &ids)];
        let tasks = ab_build_tasks(&runs, &ctx, 30, 2).unwrap();
        let pairs: BTreeSet<_> = tasks.iter().map(|t| t.pair()).collect();
        assert_eq!(pairs.len(), 3);
        assert!(ab_build_tasks(&runs, &ctx, 31, 2).is_err());
        let uneven = ab_build_tasks(&runs, &ctx, 7, 2).unwrap();
        assert_eq!(uneven.len(), 7);
    }

    #[test]
    fn disjoint_runs_fail() {
        let (_, ctx) = contexts(4);
        let runs = [run("x", &["c0", "c1"]), run("y", &["c2", "c3"])];
        assert!(ab_build_tasks(&runs, &ctx, 1, 0).is_err());
        assert!(ab_build_tasks(&runs[..1], &ctx, 1, 0).is_err());
    }

    fn judgment(task: &str, ev: &str, choice: Choice) -> ABJudgment {
        ABJudgment {
            task_id: task.into(),
            evaluator_id: ev.into(),
            choice,
            timestamp: 0,
        }
    }

    #[test]
    fn log_rejects_duplicates_and_replays() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("j.jsonl");
        let mut log = JudgmentLog::open(&path).unwrap();
        log.append(judgment("t1", "e1", Choice::Left)).unwrap();
        log.append(judgment("t1", "e2", Choice::Right)).unwrap();
        assert!(matches!(
            log.append(judgment("t1", "e1", Choice::Right)),
            Err(Error::Conflict(_))
        ));
        let replay = JudgmentLog::open(&path).unwrap();
        assert_eq!(replay.judgments(), log.judgments());
        assert!(replay.has("t1", "e2"));
    }

    #[test]
    fn stats_counts_and_kappa() {
        let (ids, ctx) = contexts(20);
        let ids: Vec<&str> = ids.iter().map(String::as_str).collect();
        let runs = [run("x", &ids), run("y", &ids)];
        let tasks = ab_build_tasks(&runs, &ctx, 20, 3).unwrap();
        let mut js = Vec::new();
        for t in &tasks {
            // both evaluators always prefer x
            let choice = if t.left.system == "x" { Choice::Left } else { Choice::Right };
            js.push(judgment(&t.task_id, "e1", choice));
            js.push(judgment(&t.task_id, "e2", choice));
        }
        let st = ab_stats(&tasks, &js).unwrap();
        let p = &st.pairs[0];
        assert_eq!((p.system_a.as_str(), p.wins_a, p.wins_b), ("x", 40, 0));
        assert_eq!(p.pct_a, 100.0);
        assert!(p.significant);
        assert_eq!(p.kappa, Some(1.0));
        assert_eq!(p.kappa_tasks, 20);
        assert_eq!(st, ab_stats(&tasks, &js).unwrap());
        assert!(ab_stats(&tasks, &[judgment("nope", "e", Choice::Left)]).is_err());
    }
}
