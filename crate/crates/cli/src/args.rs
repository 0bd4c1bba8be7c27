use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser, Serialize)]
#[command(name = "tod-rerank", version, about = "Post-generation response reranking for task-oriented dialogue")]
pub struct Cli {
    /// Seed for every randomized step.
    #[arg(long, global = true, default_value_t = rerank_core::DEFAULT_SEED)]
    pub seed: u64,

    /// Worker threads for evaluation and reranking.
    #[arg(long, global = true, env = "TOD_RERANK_THREADS", default_value_t = 1)]
    pub threads: usize,

    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
pub enum Command {
    /// Generate a synthetic corpus and/or overgenerated candidate sets.
    Synth(SynthArgs),
    /// Gold positives plus random negatives from a dialogue corpus.
    Stage1Build(Stage1Args),
    /// Self-generated high/low examples from candidate sets.
    Stage2Build(Stage2Args),
    /// Train an encoder with the classification or triplet objective.
    Train(TrainArgs),
    /// Encode a labelled anchor pool for KNN reranking.
    Anchors(AnchorArgs),
    /// Select one response per candidate set.
    Rerank(RerankArgs),
    /// Score selections against the gold responses.
    Eval(EvalArgs),
    /// Metric curve over candidate-set sizes.
    SweepCandidates(SweepCandidatesArgs),
    /// Metric grid over anchor pool sizes and k.
    SweepKnn(SweepKnnArgs),
    /// Distinct candidates per set.
    Diversity(DiversityArgs),
    /// Blind pairwise tasks from two or more selection files.
    AbBuild(AbBuildArgs),
    /// Serve A/B tasks over HTTP.
    AbServe(AbServeArgs),
    /// Preference statistics from a judgment log.
    AbStats(AbStatsArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    /// Dialogue corpus to draw gold responses from.
    #[arg(long, conflicts_with = "dialogues")]
    pub corpus: Option<PathBuf>,
    /// Generate this many templated dialogues instead of reading a corpus.
    #[arg(long)]
    pub dialogues: Option<usize>,
    /// Where to write the generated dialogues.
    #[arg(long)]
    pub corpus_out: Option<PathBuf>,
    /// Where to write candidate sets.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = rerank_core::corpus::DEFAULT_CANDIDATES)]
    pub j: usize,
    #[arg(long, default_value_t = 0.3)]
    pub noise: f64,
    /// Context window in utterances.
    #[arg(long, default_value_t = rerank_core::corpus::DEFAULT_WINDOW)]
    pub window: usize,
    /// Keep only the first N candidate sets.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct Stage1Args {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = rerank_core::staging::DEFAULT_NEGATIVES)]
    pub n_neg: usize,
    #[arg(long, default_value_t = rerank_core::corpus::DEFAULT_WINDOW)]
    pub window: usize,
    /// Keep only the first N (context, response) pairs.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
pub enum Scoring {
    Bleu,
    Rouge,
    Meteor,
    Cosine,
}

impl From<Scoring> for rerank_core::ScoringKind {
    fn from(s: Scoring) -> Self {
        match s {
            Scoring::Bleu => rerank_core::ScoringKind::Bleu,
            Scoring::Rouge => rerank_core::ScoringKind::Rouge,
            Scoring::Meteor => rerank_core::ScoringKind::Meteor,
            Scoring::Cosine => rerank_core::ScoringKind::Cosine,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct Stage2Args {
    #[arg(long)]
    pub sets: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Scoring function that splits candidates into high and low.
    #[arg(long, value_enum, default_value_t = Scoring::Bleu)]
    pub scoring: Scoring,
    /// Encoder checkpoint used as the sentence embedder for cosine scoring.
    #[arg(long)]
    pub embedder: Option<PathBuf>,
    /// Keep every high and low candidate instead of balancing.
    #[arg(long)]
    pub no_balance: bool,
    /// Only the best-scoring high candidate becomes a positive.
    #[arg(long)]
    pub single_positive: bool,
    /// Use the gold response as the only positive.
    #[arg(long)]
    pub gold_positive: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum Objective {
    Classification,
    Triplet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum Stage {
    S1,
    S2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum Init {
    Fresh,
    FromCheckpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum ModeArg {
    Cross,
    Bi,
}

impl From<ModeArg> for rerank_core::encoder::Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Cross => rerank_core::encoder::Mode::Cross,
            ModeArg::Bi => rerank_core::encoder::Mode::Bi,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum DistanceArg {
    Euclidean,
    Cosine,
}

impl From<DistanceArg> for rerank_core::encoder::Distance {
    fn from(d: DistanceArg) -> Self {
        match d {
            DistanceArg::Euclidean => rerank_core::encoder::Distance::Euclidean,
            DistanceArg::Cosine => rerank_core::encoder::Distance::Cosine,
        }
    }
}

/// Overrides for the training configuration; unset fields keep the defaults
/// of the chosen objective.
#[derive(Debug, Args, Serialize)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub warmup: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
    /// Embedding dimension for fresh models.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Average the triplet loss over all valid triplets, not only active ones.
    #[arg(long)]
    pub all_triplets: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Labelled examples.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Objective::Classification)]
    pub objective: Objective,
    #[arg(long, value_enum)]
    pub stage: Stage,
    #[arg(long, value_enum, default_value_t = Init::Fresh)]
    pub init: Init,
    /// Starting checkpoint for --init from-checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dialogue corpus for the vocabulary of a fresh model; defaults to the
    /// texts of the training data.
    #[arg(long)]
    pub vocab_corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub min_freq: usize,
    /// Classification head to train.
    #[arg(long, value_enum, default_value_t = ModeArg::Cross)]
    pub mode: ModeArg,
    /// Triplet distance.
    #[arg(long, value_enum, default_value_t = DistanceArg::Euclidean)]
    pub distance: DistanceArg,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args, Serialize)]
pub struct AnchorArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Labelled examples to sample anchors from.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Pool size; defaults to min(5000, examples).
    #[arg(long)]
    pub n_anchors: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum MethodArg {
    Class,
    Knn,
    Greedy,
    Random,
    OracleMax,
    OracleMin,
}

#[derive(Debug, Args, Serialize)]
pub struct RerankerFlags {
    #[arg(long, value_enum)]
    pub method: MethodArg,
    /// Encoder checkpoint for class and knn.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Anchor pool for knn.
    #[arg(long)]
    pub pool: Option<PathBuf>,
    /// Nearest anchors consulted by knn.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Encoder mode for class.
    #[arg(long, value_enum, default_value_t = ModeArg::Cross)]
    pub mode: ModeArg,
    /// Rerank only the sampled candidates, leaving out the greedy response.
    #[arg(long)]
    pub no_greedy: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct RerankArgs {
    #[arg(long)]
    pub sets: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub reranker: RerankerFlags,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub sets: PathBuf,
    #[arg(long)]
    pub selections: PathBuf,
    /// Write the report as JSON here as well as printing it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum Phase {
    Inference,
    Training,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepCandidatesArgs {
    /// Evaluation candidate sets.
    #[arg(long)]
    pub sets: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Phase::Inference)]
    pub phase: Phase,
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 5, 10, 15, 20])]
    pub counts: Vec<usize>,
    #[command(flatten)]
    pub reranker: RerankerFlags,
    /// Training candidate sets for the training phase.
    #[arg(long)]
    pub train_sets: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Scoring::Bleu)]
    pub scoring: Scoring,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepKnnArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Labelled examples to draw anchors from.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub sets: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [10usize, 100, 500, 1000, 5000])]
    pub pools: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 5, 10, 50])]
    pub ks: Vec<usize>,
    #[arg(long)]
    pub no_greedy: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct DiversityArgs {
    #[arg(long)]
    pub sets: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct AbBuildArgs {
    /// Candidate sets supplying contexts and golds.
    #[arg(long)]
    pub sets: PathBuf,
    /// Selection files, as PATH or NAME=PATH; at least two.
    #[arg(long = "run", required = true, num_args = 1)]
    pub runs: Vec<String>,
    #[arg(long, default_value_t = 100)]
    pub n_tasks: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct AbServeArgs {
    #[arg(long)]
    pub tasks: PathBuf,
    /// Append-only judgment log.
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long, env = "TOD_RERANK_PORT", default_value_t = rerank_core::eval::server::DEFAULT_PORT)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Directory of static frontend files.
    #[arg(long)]
    pub assets: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct AbStatsArgs {
    #[arg(long)]
    pub tasks: PathBuf,
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    pub draws: usize,
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long, default_value_t = 6)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub tolerance: f64,
}
