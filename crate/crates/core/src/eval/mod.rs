//! Experiments over reranker outputs: evaluation, sweeps, and human A/B
//! preference collection.

pub mod ab;
pub mod harness;
pub mod server;
pub mod stats;

pub use ab::{ab_build_tasks, ab_stats, ABJudgment, ABStats, ABTask, Choice, JudgmentLog, PairStats};
pub use harness::{
    diversity, evaluate, golds, oracle_rerank, rerank_all, run, sweep_candidates_inference, sweep_candidates_training,
    sweep_knn, CurvePoint, Diversity, EvalRun, GridCell, KnnGrid, Reranker, Selection, SelectionRecord, Stage2Recipe,
};
pub use stats::{binomial_test_two_sided, fleiss_kappa};
