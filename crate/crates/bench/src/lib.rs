//! Shared fixtures for the pipeline benchmarks.

use rerank_core::corpus::{response_pairs, synth_candidate_sets, synth_dialogues};
use rerank_core::encoder::build_vocab;
use rerank_core::staging::{build_stage1, build_stage2, Stage2Options};
use rerank_core::{CandidateSet, LabeledExample, Model, ScoringKind};

pub struct Fixture {
    pub model: Model,
    pub sets: Vec<CandidateSet>,
    pub stage1: Vec<LabeledExample>,
    pub stage2: Vec<LabeledExample>,
}

/// Untrained model, candidate sets and both kinds of training examples over
/// `dialogues` synthetic dialogues.
pub fn fixture(dialogues: usize, dim: usize) -> Fixture {
    let d = synth_dialogues(dialogues, 1);
    let vocab = build_vocab(&d, 1).expect("non-empty corpus");
    let model = Model::init(vocab, dim, 128, 1).expect("valid model");
    let sets = synth_candidate_sets(&d, 3, 20, 0.3, 1).expect("synthetic sets");
    let pairs = response_pairs(&d, 3).expect("pairs");
    let stage1 = build_stage1(&pairs, 19.min(pairs.len() - 1), 1).expect("stage 1");
    let stage2 = build_stage2(&sets, ScoringKind::Bleu, 1, Stage2Options::default(), None).expect("stage 2");
    Fixture {
        model,
        sets,
        stage1,
        stage2,
    }
}
