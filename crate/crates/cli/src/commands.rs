use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use rerank_core::corpus::{
    load_candidate_sets, load_corpus, response_pairs, synth_candidate_sets, synth_dialogues, CandidateSetRecord,
};
use rerank_core::encoder::{
    build_vocab, checked_objectives, grad_check, random_check_problem, train, LossKind, Objective, TripletAveraging,
    Vocab,
};
use rerank_core::eval::ab::{load_tasks, ABTaskRecord};
use rerank_core::eval::harness::{curve_csv, grid_csv};
use rerank_core::eval::server::{router, AbState};
use rerank_core::eval::{
    ab_build_tasks, ab_stats, diversity, evaluate, golds, rerank_all, sweep_candidates_inference,
    sweep_candidates_training, sweep_knn, EvalRun, JudgmentLog, Reranker, Selection, Stage2Recipe,
};
use rerank_core::io::{read_jsonl, write_atomic, write_jsonl};
use rerank_core::rerank::build_anchor_pool;
use rerank_core::staging::{build_stage1, build_stage2, load_examples, to_records, Stage2Options};
use rerank_core::{
    AnchorPool, CandidateSet, Checkpoint, Context, Dialogue, LabeledExample, Model, OutputMeta, ScoringKind,
    Speaker, TrainConfig, Utterance,
};

use crate::args::Objective as Objective_;
use crate::args::*;

const DEFAULT_ANCHORS: usize = 5000;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] rerank_core::Error),
    #[error("{0}")]
    Invariant(String),
}

type Result<T> = std::result::Result<T, CliError>;

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(CliError::Usage(msg.into()))
}

struct Ctx {
    seed: u64,
    threads: usize,
    meta: OutputMeta,
}

pub fn run(cli: Cli) -> Result<()> {
    if cli.threads == 0 {
        return usage("--threads must be at least 1");
    }
    let command = std::env::args().skip(1).collect::<Vec<_>>().join(" ");
    let ctx = Ctx {
        seed: cli.seed,
        threads: cli.threads,
        meta: OutputMeta::new(command, cli.seed),
    };
    info!(
        "config: {}",
        serde_json::to_string(&cli).unwrap_or_else(|e| format!("<unserializable: {e}>"))
    );
    match &cli.command {
        Command::Synth(a) => synth(&ctx, a),
        Command::Stage1Build(a) => stage1(&ctx, a),
        Command::Stage2Build(a) => stage2(&ctx, a),
        Command::Train(a) => train_cmd(&ctx, a),
        Command::Anchors(a) => anchors(&ctx, a),
        Command::Rerank(a) => rerank(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::SweepCandidates(a) => sweep_candidates(&ctx, a),
        Command::SweepKnn(a) => sweep_knn_cmd(&ctx, a),
        Command::Diversity(a) => diversity_cmd(&ctx, a),
        Command::AbBuild(a) => ab_build(&ctx, a),
        Command::AbServe(a) => ab_serve(a),
        Command::AbStats(a) => ab_stats_cmd(&ctx, a),
        Command::Gradcheck(a) => gradcheck(&ctx, a),
    }
}

/// A JSON document with the provenance header as its `_meta` field.
fn write_json<T: Serialize>(ctx: &Ctx, path: &Path, value: &T) -> Result<()> {
    let mut v = serde_json::to_value(value).map_err(rerank_core::Error::from)?;
    match v.as_object_mut() {
        Some(obj) => {
            obj.insert(
                "_meta".into(),
                serde_json::to_value(&ctx.meta).map_err(rerank_core::Error::from)?,
            );
        }
        None => v = serde_json::json!({ "_meta": ctx.meta, "value": v }),
    }
    let mut text = serde_json::to_string_pretty(&v).map_err(rerank_core::Error::from)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    info!("wrote {}", path.display());
    Ok(())
}

/// CSV body plus a `<path>.meta.json` sidecar holding the provenance.
fn write_csv(ctx: &Ctx, path: &Path, body: &str) -> Result<()> {
    write_atomic(path, body.as_bytes())?;
    let mut sidecar = path.as_os_str().to_owned();
    sidecar.push(".meta.json");
    write_json(ctx, Path::new(&sidecar), &serde_json::json!({}))?;
    info!("wrote {}", path.display());
    Ok(())
}

fn write_records<T: Serialize>(ctx: &Ctx, path: &Path, records: &[T]) -> Result<()> {
    write_jsonl(path, records, Some(&ctx.meta))?;
    info!("wrote {} records to {}", records.len(), path.display());
    Ok(())
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!(
        "{}",
        serde_json::to_string_pretty(value).map_err(rerank_core::Error::from)?
    );
    Ok(())
}

fn synth(ctx: &Ctx, a: &SynthArgs) -> Result<()> {
    let dialogues = match (&a.corpus, a.dialogues) {
        (Some(p), None) => load_corpus(p)?,
        (None, Some(n)) if n > 0 => synth_dialogues(n, ctx.seed),
        (None, Some(_)) => return usage("--dialogues must be positive"),
        _ => return usage("pass exactly one of --corpus or --dialogues"),
    };
    if a.out.is_none() && a.corpus_out.is_none() {
        return usage("nothing to write: pass --out and/or --corpus-out");
    }
    if let Some(p) = &a.corpus_out {
        write_records(ctx, p, &dialogues)?;
    }
    if let Some(p) = &a.out {
        let mut sets = synth_candidate_sets(&dialogues, a.window, a.j, a.noise, ctx.seed)?;
        if let Some(n) = a.limit {
            sets.truncate(n);
        }
        let records: Vec<CandidateSetRecord> = sets.iter().map(CandidateSetRecord::from).collect();
        write_records(ctx, p, &records)?;
    }
    Ok(())
}

fn stage1(ctx: &Ctx, a: &Stage1Args) -> Result<()> {
    let dialogues = load_corpus(&a.corpus)?;
    let mut pairs = response_pairs(&dialogues, a.window)?;
    if let Some(n) = a.limit {
        pairs.truncate(n);
    }
    let examples = build_stage1(&pairs, a.n_neg, ctx.seed)?;
    write_records(ctx, &a.out, &to_records(&examples))
}

fn stage2(ctx: &Ctx, a: &Stage2Args) -> Result<()> {
    let sets = load_candidate_sets(&a.sets)?;
    let kind: ScoringKind = a.scoring.into();
    let embedder = match (&a.embedder, kind) {
        (Some(p), _) => Some(Checkpoint::load(p)?.model),
        (None, ScoringKind::Cosine) => return usage("--scoring cosine needs --embedder"),
        (None, _) => None,
    };
    let opts = Stage2Options {
        balance: !a.no_balance,
        multiple_positives: !a.single_positive,
        self_generated_positives: !a.gold_positive,
    };
    let examples = build_stage2(
        &sets,
        kind,
        ctx.seed,
        opts,
        embedder.as_ref().map(|m| m as &dyn rerank_core::metrics::Embedder),
    )?;
    if examples.is_empty() {
        warn!("no stage-2 examples: every candidate scored the same as greedy");
    }
    write_records(ctx, &a.out, &to_records(&examples))
}

fn train_config(ctx: &Ctx, kind: LossKind, f: &TrainFlags, mode: ModeArg, distance: DistanceArg) -> TrainConfig {
    let d = TrainConfig::for_loss(kind);
    TrainConfig {
        learning_rate: f.learning_rate.unwrap_or(d.learning_rate),
        warmup_fraction: f.warmup.unwrap_or(d.warmup_fraction),
        weight_decay: f.weight_decay.unwrap_or(d.weight_decay),
        epochs: f.epochs.unwrap_or(d.epochs),
        batch_size: f.batch_size.unwrap_or(d.batch_size),
        margin: f.margin.unwrap_or(d.margin),
        max_seq_len: f.max_seq_len.unwrap_or(d.max_seq_len),
        mode: mode.into(),
        distance: distance.into(),
        triplet_averaging: if f.all_triplets {
            TripletAveraging::AllValid
        } else {
            TripletAveraging::PositiveOnly
        },
        dim: f.dim.unwrap_or(d.dim),
        seed: ctx.seed,
    }
}

/// Treats each example's context plus response as a dialogue so the
/// vocabulary can come from the training data itself.
fn example_dialogues(examples: &[LabeledExample]) -> Vec<Dialogue> {
    examples
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let mut turns = e.context.utterances.clone();
            turns.push(Utterance::new(Speaker::System, e.response.clone()));
            Dialogue {
                id: i.to_string(),
                turns,
            }
        })
        .collect()
}

fn train_cmd(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    let examples = load_examples(&a.data)?;
    let kind = match a.objective {
        Objective_::Classification => LossKind::Classification,
        Objective_::Triplet => LossKind::Triplet,
    };
    let mut cfg = train_config(ctx, kind, &a.train, a.mode, a.distance);
    let init = match (a.init, &a.checkpoint) {
        (Init::FromCheckpoint, Some(p)) => {
            let m = Checkpoint::load(p)?.model;
            if a.train.dim.is_some_and(|d| d != m.dim()) {
                return usage(format!("--dim conflicts with the checkpoint dimension {}", m.dim()));
            }
            cfg.dim = m.dim();
            if a.train.max_seq_len.is_none() {
                cfg.max_seq_len = m.max_seq_len;
            }
            Model::new(m.vocab, m.params, cfg.max_seq_len)?
        }
        (Init::FromCheckpoint, None) => return usage("--init from-checkpoint needs --checkpoint"),
        (Init::Fresh, Some(_)) => return usage("--checkpoint is only used with --init from-checkpoint"),
        (Init::Fresh, None) => {
            if a.stage == Stage::S2 {
                warn!("stage-2 training from a fresh model skips the stage-1 warm start");
            }
            let vocab: Vocab = match &a.vocab_corpus {
                Some(p) => build_vocab(&load_corpus(p)?, a.min_freq)?,
                None => build_vocab(&example_dialogues(&examples), a.min_freq)?,
            };
            info!("vocabulary of {} tokens", vocab.len());
            Model::init(vocab, cfg.dim, cfg.max_seq_len, ctx.seed)?
        }
    };
    let (model, report) = train(&init, &examples, &cfg, kind)?;
    info!("trained {} steps, final loss {:?}", report.steps, report.epoch_losses.last());
    Checkpoint::new(model, Some(cfg), Some(ctx.meta.clone())).save(&a.out)?;
    info!("wrote {}", a.out.display());
    Ok(())
}

/// On-disk anchor pool.
#[derive(Serialize, Deserialize)]
struct PoolFile {
    encodings: Vec<Vec<f64>>,
    labels: Vec<u8>,
    sources: Vec<(String, u64)>,
}

fn anchors(ctx: &Ctx, a: &AnchorArgs) -> Result<()> {
    let model = Checkpoint::load(&a.checkpoint)?.model;
    let examples = load_examples(&a.data)?;
    let n = a.n_anchors.unwrap_or(DEFAULT_ANCHORS.min(examples.len()));
    let pool = build_anchor_pool(&model, &examples, n, ctx.seed)?;
    info!("{} anchors, {:.3} positive", pool.len(), pool.positive_fraction());
    write_json(
        ctx,
        &a.out,
        &PoolFile {
            encodings: pool.encodings,
            labels: pool.labels,
            sources: pool.sources,
        },
    )
}

fn load_pool(path: &Path) -> Result<AnchorPool> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        CliError::Core(rerank_core::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })?;
    let f: PoolFile = serde_json::from_str(&text).map_err(rerank_core::Error::from)?;
    Ok(AnchorPool::new(f.encodings, f.labels, f.sources)?)
}

/// Owned resources behind a [`Reranker`].
struct Loaded {
    model: Option<Model>,
    pool: Option<AnchorPool>,
}

fn load_reranker(f: &RerankerFlags) -> Result<Loaded> {
    let needs_model = matches!(f.method, MethodArg::Class | MethodArg::Knn);
    let model = match (&f.checkpoint, needs_model) {
        (Some(p), true) => Some(Checkpoint::load(p)?.model),
        (None, true) => return usage("--checkpoint is required for class and knn"),
        (Some(_), false) => {
            warn!("--checkpoint is ignored by this method");
            None
        }
        (None, false) => None,
    };
    let pool = match (&f.pool, f.method) {
        (Some(p), MethodArg::Knn) => {
            let pool = load_pool(p)?;
            let dim = model.as_ref().map_or(0, Model::dim);
            if pool.encodings.iter().any(|e| e.len() != dim) {
                return usage(format!("pool encodings do not match the checkpoint dimension {dim}"));
            }
            Some(pool)
        }
        (None, MethodArg::Knn) => return usage("--pool is required for knn"),
        _ => None,
    };
    Ok(Loaded { model, pool })
}

fn reranker<'a>(ctx: &Ctx, f: &RerankerFlags, l: &'a Loaded) -> Result<Reranker<'a>> {
    Ok(match f.method {
        MethodArg::Class => Reranker::Classification {
            model: l.model.as_ref().expect("loaded"),
            mode: f.mode.into(),
        },
        MethodArg::Knn => {
            let pool = l.pool.as_ref().expect("loaded");
            if f.k == 0 || f.k > pool.len() {
                return usage(format!("--k must lie in 1..={}", pool.len()));
            }
            Reranker::Knn {
                model: l.model.as_ref().expect("loaded"),
                pool,
                k: f.k,
            }
        }
        MethodArg::Greedy => Reranker::Greedy,
        MethodArg::Random => Reranker::Random { seed: ctx.seed },
        MethodArg::OracleMax => Reranker::OracleMax,
        MethodArg::OracleMin => Reranker::OracleMin,
    })
}

fn rerank(ctx: &Ctx, a: &RerankArgs) -> Result<()> {
    let sets = load_candidate_sets(&a.sets)?;
    let loaded = load_reranker(&a.reranker)?;
    let r = reranker(ctx, &a.reranker, &loaded)?;
    let records = rerank_all(&r, &sets, !a.reranker.no_greedy, ctx.threads)?;
    write_records(ctx, &a.out, &records)
}

fn load_selections(path: &Path) -> Result<Vec<Selection>> {
    Ok(read_jsonl::<Selection>(path)?.into_iter().map(|(_, s)| s).collect())
}

fn eval(ctx: &Ctx, a: &EvalArgs) -> Result<()> {
    let sets = load_candidate_sets(&a.sets)?;
    let selections = load_selections(&a.selections)?;
    let report = evaluate(&selections, &golds(&sets), ctx.threads)?;
    println!("{report}");
    if let Some(p) = &a.out {
        write_json(ctx, p, &report)?;
    }
    Ok(())
}

fn sweep_candidates(ctx: &Ctx, a: &SweepCandidatesArgs) -> Result<()> {
    let sets = load_candidate_sets(&a.sets)?;
    let include_greedy = !a.reranker.no_greedy;
    let points = match a.phase {
        Phase::Inference => {
            let loaded = load_reranker(&a.reranker)?;
            let r = reranker(ctx, &a.reranker, &loaded)?;
            sweep_candidates_inference(&r, &sets, &a.counts, include_greedy, ctx.threads)?
        }
        Phase::Training => {
            let Some(train_path) = &a.train_sets else {
                return usage("--phase training needs --train-sets");
            };
            let Some(ck) = &a.reranker.checkpoint else {
                return usage("--phase training needs --checkpoint as the stage-1 model");
            };
            if a.reranker.method != MethodArg::Class {
                return usage("--phase training retrains a classifier; use --method class");
            }
            let init = Checkpoint::load(ck)?.model;
            let train_sets = load_candidate_sets(train_path)?;
            let mut flags_cfg =
                train_config(ctx, LossKind::Classification, &a.train, a.reranker.mode, DistanceArg::Euclidean);
            flags_cfg.dim = init.dim();
            flags_cfg.max_seq_len = init.max_seq_len;
            let recipe = Stage2Recipe {
                init: &init,
                kind: a.scoring.into(),
                options: Stage2Options::default(),
                config: flags_cfg,
                seed: ctx.seed,
            };
            sweep_candidates_training(&recipe, &train_sets, &sets, &a.counts, include_greedy, ctx.threads)?
        }
    };
    for p in &points {
        info!("count {:>3}: {}", p.count, p.report);
    }
    write_csv(ctx, &a.out, &curve_csv(&points))
}

fn sweep_knn_cmd(ctx: &Ctx, a: &SweepKnnArgs) -> Result<()> {
    let model = Checkpoint::load(&a.checkpoint)?.model;
    let examples = load_examples(&a.data)?;
    let sets = load_candidate_sets(&a.sets)?;
    let grid = sweep_knn(
        &model,
        &examples,
        &a.pools,
        &a.ks,
        &sets,
        !a.no_greedy,
        ctx.seed,
        ctx.threads,
    )?;
    for s in &grid.skipped {
        warn!("skipped pool {} k {}: {}", s.pool, s.k, s.reason);
    }
    write_csv(ctx, &a.out, &grid_csv(&grid))
}

fn diversity_cmd(ctx: &Ctx, a: &DiversityArgs) -> Result<()> {
    let d = diversity(&load_candidate_sets(&a.sets)?)?;
    print_json(&d)?;
    if let Some(p) = &a.out {
        write_json(ctx, p, &d)?;
    }
    Ok(())
}

fn parse_run(run: &str) -> (String, PathBuf) {
    match run.split_once('=') {
        Some((name, path)) if !name.is_empty() => (name.to_string(), PathBuf::from(path)),
        _ => {
            let path = PathBuf::from(run);
            let name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| run.to_string());
            (name, path)
        }
    }
}

fn ab_build(ctx: &Ctx, a: &AbBuildArgs) -> Result<()> {
    if a.runs.len() < 2 {
        return usage("pass at least two --run files");
    }
    let sets: Vec<CandidateSet> = load_candidate_sets(&a.sets)?;
    let golds = golds(&sets);
    let contexts: HashMap<String, Context> = sets
        .iter()
        .map(|cs| (cs.context.context_id.clone(), cs.context.clone()))
        .collect();
    let mut runs = Vec::with_capacity(a.runs.len());
    for run in &a.runs {
        let (name, path) = parse_run(run);
        let selections = load_selections(&path)?;
        let report = evaluate(&selections, &golds, ctx.threads)?;
        info!("{name}: {report}");
        runs.push(EvalRun {
            method: name,
            selections,
            report,
            wall_time_s: 0.0,
        });
    }
    let tasks = ab_build_tasks(&runs, &contexts, a.n_tasks, ctx.seed)?;
    let records: Vec<ABTaskRecord> = tasks.iter().map(ABTaskRecord::from).collect();
    write_records(ctx, &a.out, &records)
}

fn ab_serve(a: &AbServeArgs) -> Result<()> {
    let tasks = load_tasks(&a.tasks)?;
    let log = JudgmentLog::open(&a.store)?;
    info!(
        "{} tasks, {} judgments already logged",
        tasks.len(),
        log.judgments().len()
    );
    let state = Arc::new(AbState::new(tasks, log)?);
    let app = router(state, a.assets.clone());
    let addr = format!("{}:{}", a.host, a.port);
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start runtime: {e}")))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| CliError::Usage(format!("cannot bind {addr}: {e}")))?;
        info!("listening on http://{addr}");
        axum_serve(listener, app).await
    })
}

async fn axum_serve(listener: tokio::net::TcpListener, app: axum::Router) -> Result<()> {
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| CliError::Usage(format!("server error: {e}")))
}

fn ab_stats_cmd(ctx: &Ctx, a: &AbStatsArgs) -> Result<()> {
    let tasks = load_tasks(&a.tasks)?;
    let log = JudgmentLog::open(&a.store)?;
    let stats = ab_stats(&tasks, log.judgments())?;
    for p in &stats.pairs {
        println!(
            "{} vs {}: {:.1}% / {:.1}% of {} (p = {}){} kappa = {}",
            p.system_a,
            p.system_b,
            p.pct_a,
            p.pct_b,
            p.total,
            p.p_value.map_or("n/a".into(), |v| format!("{v:.4}")),
            if p.significant { " *" } else { "" },
            p.kappa.map_or("n/a".into(), |k| format!("{k:.3}")),
        );
    }
    if let Some(p) = &a.out {
        write_json(ctx, p, &stats)?;
    }
    Ok(())
}

fn objective_name(o: &Objective) -> String {
    match o {
        Objective::Classification(m) => format!("classification/{}", serde_json::to_string(m).unwrap_or_default()),
        Objective::Triplet(t) => format!("triplet/{}", serde_json::to_string(&t.distance).unwrap_or_default()),
    }
    .replace('"', "")
}

fn gradcheck(ctx: &Ctx, a: &GradcheckArgs) -> Result<()> {
    if a.draws == 0 || a.dim == 0 {
        return usage("--draws and --dim must be positive");
    }
    let mut failed = Vec::new();
    for obj in checked_objectives() {
        let mut worst = 0.0f64;
        for draw in 0..a.draws {
            let (model, batch) = random_check_problem(a.dim, a.batch, ctx.seed.wrapping_add(draw as u64))?;
            worst = worst.max(grad_check(&model, &batch, &obj, a.eps)?);
        }
        let name = objective_name(&obj);
        let ok = worst < a.tolerance;
        println!("{name:28} max relative error {worst:.3e} {}", if ok { "ok" } else { "FAIL" });
        if !ok {
            failed.push(name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Invariant(format!(
            "gradient check above {} for {}",
            a.tolerance,
            failed.join(", ")
        )))
    }
}
