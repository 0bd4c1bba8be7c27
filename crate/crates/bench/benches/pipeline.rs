use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use rerank_bench::fixture;
use rerank_core::encoder::{Mode, Objective, TripletConfig};
use rerank_core::eval::{run, Reranker};
use rerank_core::metrics::{meteor, rouge_l, sentence_bleu, tokenize};
use rerank_core::rerank::{build_anchor_pool, rerank_classification, rerank_knn};

fn metrics(c: &mut Criterion) {
    let f = fixture(10, 32);
    let cs = &f.sets[0];
    let gold = tokenize(&cs.gold);
    let cands: Vec<_> = cs.candidates.iter().map(|s| tokenize(s)).collect();
    let mut g = c.benchmark_group("metrics");
    g.bench_function("sentence_bleu_x20", |b| {
        b.iter(|| cands.iter().map(|t| sentence_bleu(t, &gold).unwrap()).sum::<f64>())
    });
    g.bench_function("rouge_l_x20", |b| b.iter(|| cands.iter().map(|t| rouge_l(t, &gold).unwrap()).sum::<f64>()));
    g.bench_function("meteor_x20", |b| b.iter(|| cands.iter().map(|t| meteor(t, &gold).unwrap()).sum::<f64>()));
    g.finish();
}

fn encoder(c: &mut Criterion) {
    let f = fixture(40, 64);
    let batch: Vec<_> = f.stage2.iter().take(64).cloned().collect();
    let mut g = c.benchmark_group("encoder");
    let cs = &f.sets[0];
    g.bench_function("encode_pair", |b| b.iter(|| f.model.encode_pair(black_box(&cs.context), &cs.gold)));
    for (name, obj) in [
        ("class_grad_batch64", Objective::Classification(Mode::Cross)),
        ("triplet_grad_batch64", Objective::Triplet(TripletConfig::default())),
    ] {
        g.bench_function(name, |b| {
            b.iter_batched(|| batch.clone(), |bt| obj.loss_grad(&f.model, &bt).unwrap(), BatchSize::SmallInput)
        });
    }
    g.finish();
}

fn rerank(c: &mut Criterion) {
    let f = fixture(80, 64);
    let pool = build_anchor_pool(&f.model, &f.stage1, f.stage1.len().min(5000), 1).unwrap();
    let cs = &f.sets[0];
    let cands = cs.inference_candidates(true);
    let mut g = c.benchmark_group("rerank");
    g.bench_function("classification_set21", |b| {
        b.iter(|| rerank_classification(&f.model, Mode::Cross, &cs.context, &cands).unwrap())
    });
    g.bench_function(format!("knn_set21_pool{}", pool.len()), |b| {
        b.iter(|| rerank_knn(&f.model, &pool, &cs.context, &cands, 10).unwrap())
    });
    g.sample_size(10);
    let r = Reranker::Classification {
        model: &f.model,
        mode: Mode::Cross,
    };
    g.bench_function(format!("evaluate_{}_sets", f.sets.len()), |b| b.iter(|| run(&r, &f.sets, true, 1).unwrap()));
    g.finish();
}

criterion_group!(benches, metrics, encoder, rerank);
criterion_main!(benches);
