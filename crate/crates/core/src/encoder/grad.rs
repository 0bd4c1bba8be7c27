//! Losses with hand-derived gradients, and a central-difference checker.

use serde::{Deserialize, Serialize};

use super::{bi_features, softmax2, Distance, EncoderParams, Mode, Model, Pooled};
use crate::error::{Error, Result};
use crate::corpus::{Context, Speaker, Utterance};
use crate::staging::{LabeledExample, Origin};

/// Denominator floor for relative gradient error, so entries where both
/// gradients are numerically zero do not dominate.
const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripletAveraging {
    /// Mean over triplets whose hinge is active.
    PositiveOnly,
    /// Mean over every valid triplet.
    AllValid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripletConfig {
    pub margin: f64,
    pub distance: Distance,
    pub averaging: TripletAveraging,
}

impl Default for TripletConfig {
    fn default() -> Self {
        TripletConfig {
            margin: 5.0,
            distance: Distance::Euclidean,
            averaging: TripletAveraging::PositiveOnly,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Objective {
    Classification(Mode),
    Triplet(TripletConfig),
}

impl Objective {
    pub fn loss_grad(&self, model: &Model, batch: &[LabeledExample]) -> Result<(f64, EncoderParams)> {
        match self {
            Objective::Classification(mode) => class_loss_grad(model, batch, *mode),
            Objective::Triplet(cfg) => triplet_loss_grad(model, batch, cfg),
        }
    }
}

/// Backpropagates `de` through tanh, the projection, mean pooling and the
/// embedding lookup.
fn backprop_pool(model: &Model, pooled: &Pooled, de: &[f64], grads: &mut EncoderParams) {
    let dz: Vec<f64> = de
        .iter()
        .zip(&pooled.e)
        .map(|(g, e)| g * (1.0 - e * e))
        .collect();
    grads.proj_w.add_outer(&dz, &pooled.h);
    for (b, g) in grads.proj_b.iter_mut().zip(&dz) {
        *b += g;
    }
    let dh = model.params.proj_w.matvec_t(&dz);
    let inv_n = 1.0 / pooled.ids.len().max(1) as f64;
    for &id in &pooled.ids {
        for (x, g) in grads.embeddings.row_mut(id as usize).iter_mut().zip(&dh) {
            *x += g * inv_n;
        }
    }
}

fn nll_and_dlogits(logits: [f64; 2], label: u8, scale: f64) -> (f64, [f64; 2]) {
    let p = softmax2(logits);
    let m = logits[0].max(logits[1]);
    let lse = m + ((logits[0] - m).exp() + (logits[1] - m).exp()).ln();
    let l = label as usize;
    let loss = lse - logits[l];
    let mut g = [p[0] * scale, p[1] * scale];
    g[l] -= scale;
    (loss, g)
}

/// Mean cross-entropy of the label given (context, response) and its
/// gradient.
pub fn class_loss_grad(model: &Model, batch: &[LabeledExample], mode: Mode) -> Result<(f64, EncoderParams)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grads = model.params.zeros_like();
    let mut total = 0.0;
    for ex in batch {
        match mode {
            Mode::Cross => {
                let pooled = model.pool(&model.pair_ids(&ex.context, &ex.response));
                let (loss, g) = nll_and_dlogits(model.params.cls_logits(&pooled.e), ex.label, scale);
                total += loss;
                grads.cls_w.add_outer(&g, &pooled.e);
                grads.cls_b[0] += g[0];
                grads.cls_b[1] += g[1];
                let de = model.params.cls_w.matvec_t(&g);
                backprop_pool(model, &pooled, &de, &mut grads);
            }
            Mode::Bi => {
                let u = model.pool(&model.context_ids(&ex.context));
                let w = model.pool(&model.text_ids(&ex.response));
                let f = bi_features(&u.e, &w.e);
                let (loss, g) = nll_and_dlogits(model.params.bi_logits(&f), ex.label, scale);
                total += loss;
                grads.bi_w.add_outer(&g, &f);
                grads.bi_b[0] += g[0];
                grads.bi_b[1] += g[1];
                let df = model.params.bi_w.matvec_t(&g);
                let d = u.e.len();
                let mut du = df[..d].to_vec();
                let mut dw = df[d..2 * d].to_vec();
                for k in 0..d {
                    let s = sign(u.e[k] - w.e[k]) * df[2 * d + k];
                    du[k] += s;
                    dw[k] -= s;
                }
                backprop_pool(model, &u, &du, &mut grads);
                backprop_pool(model, &w, &dw, &mut grads);
            }
        }
    }
    Ok((total * scale, grads))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Distance and its gradients with respect to both arguments.
fn distance_grad(kind: Distance, a: &[f64], b: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    match kind {
        Distance::Euclidean => {
            let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
            let d = norm(&diff);
            if d == 0.0 {
                return (0.0, vec![0.0; a.len()], vec![0.0; a.len()]);
            }
            let ga: Vec<f64> = diff.iter().map(|x| x / d).collect();
            let gb = ga.iter().map(|x| -x).collect();
            (d, ga, gb)
        }
        Distance::Cosine => {
            let (na, nb) = (norm(a), norm(b));
            if na == 0.0 || nb == 0.0 {
                return (1.0, vec![0.0; a.len()], vec![0.0; a.len()]);
            }
            let s = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
            let ga = a
                .iter()
                .zip(b)
                .map(|(x, y)| -(y / (na * nb) - s * x / (na * na)))
                .collect();
            let gb = a
                .iter()
                .zip(b)
                .map(|(x, y)| -(x / (na * nb) - s * y / (nb * nb)))
                .collect();
            (1.0 - s, ga, gb)
        }
    }
}

/// Batch-all triplet loss over joint pair encodings: every (anchor,
/// positive, negative) with matching anchor/positive labels and a
/// differently labelled negative.
pub fn triplet_loss_grad(
    model: &Model,
    batch: &[LabeledExample],
    cfg: &TripletConfig,
) -> Result<(f64, EncoderParams)> {
    let has = |l: u8| batch.iter().any(|e| e.label == l);
    if !has(0) || !has(1) {
        return Err(Error::invalid("triplet batch needs both labels"));
    }
    let pooled: Vec<Pooled> = batch
        .iter()
        .map(|ex| model.pool(&model.pair_ids(&ex.context, &ex.response)))
        .collect();
    let n = batch.len();
    let mut dist = vec![0.0; n * n];
    for a in 0..n {
        for b in 0..n {
            if a != b {
                dist[a * n + b] = distance_grad(cfg.distance, &pooled[a].e, &pooled[b].e).0;
            }
        }
    }
    // weight[a][b]: signed count of active triplets using D(a, b)
    let mut weight = vec![0.0; n * n];
    let mut total = 0.0;
    let (mut active, mut valid) = (0usize, 0usize);
    for a in 0..n {
        for p in 0..n {
            if p == a || batch[p].label != batch[a].label {
                continue;
            }
            for q in 0..n {
                if batch[q].label == batch[a].label {
                    continue;
                }
                valid += 1;
                let v = dist[a * n + p] - dist[a * n + q] + cfg.margin;
                if v > 0.0 {
                    active += 1;
                    total += v;
                    weight[a * n + p] += 1.0;
                    weight[a * n + q] -= 1.0;
                }
            }
        }
    }
    let denom = match cfg.averaging {
        TripletAveraging::PositiveOnly => active,
        TripletAveraging::AllValid => valid,
    };
    let mut grads = model.params.zeros_like();
    if active == 0 || denom == 0 {
        return Ok((0.0, grads));
    }
    let scale = 1.0 / denom as f64;
    let d = model.dim();
    let mut de = vec![vec![0.0; d]; n];
    for a in 0..n {
        for b in 0..n {
            let w = weight[a * n + b];
            if w == 0.0 {
                continue;
            }
            let (_, ga, gb) = distance_grad(cfg.distance, &pooled[a].e, &pooled[b].e);
            for k in 0..d {
                de[a][k] += w * scale * ga[k];
                de[b][k] += w * scale * gb[k];
            }
        }
    }
    for (p, g) in pooled.iter().zip(&de) {
        backprop_pool(model, p, g, &mut grads);
    }
    Ok((total * scale, grads))
}

pub fn loss_only(model: &Model, batch: &[LabeledExample], objective: &Objective) -> Result<f64> {
    Ok(objective.loss_grad(model, batch)?.0)
}

/// Maximum relative error between the analytic gradient and central finite
/// differences with step `eps`, over every parameter entry.
pub fn grad_check(model: &Model, batch: &[LabeledExample], objective: &Objective, eps: f64) -> Result<f64> {
    let (_, analytic) = objective.loss_grad(model, batch)?;
    grad_check_against(model, batch, objective, eps, &analytic)
}

/// As [`grad_check`], comparing against a supplied gradient.
pub fn grad_check_against(
    model: &Model,
    batch: &[LabeledExample],
    objective: &Objective,
    eps: f64,
    analytic: &EncoderParams,
) -> Result<f64> {
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::invalid(format!("finite-difference step {eps} outside (0, 1e-3]")));
    }
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for (t, grad_tensor) in analytic.tensors().into_iter().enumerate() {
        for (i, &a) in grad_tensor.iter().enumerate() {
            let orig = probe.params.tensors()[t][i];
            probe.params.tensors_mut()[t][i] = orig + eps;
            let plus = loss_only(&probe, batch, objective)?;
            probe.params.tensors_mut()[t][i] = orig - eps;
            let minus = loss_only(&probe, batch, objective)?;
            probe.params.tensors_mut()[t][i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// The objectives exercised by gradient checking: both classification heads
/// and the triplet loss under each distance.
pub fn checked_objectives() -> Vec<Objective> {
    let mut out = vec![Objective::Classification(Mode::Cross), Objective::Classification(Mode::Bi)];
    for distance in [Distance::Euclidean, Distance::Cosine] {
        out.push(Objective::Triplet(TripletConfig {
            distance,
            ..TripletConfig::default()
        }));
    }
    out
}

/// A randomly initialised model over a small vocabulary and a random batch
/// of `batch` examples (at least two) containing both labels.
pub fn random_check_problem(dim: usize, batch: usize, seed: u64) -> Result<(Model, Vec<LabeledExample>)> {
    use rand::Rng;

    if batch < 2 {
        return Err(Error::invalid("a gradient-check batch needs at least two examples"));
    }
    const WORDS: [&str; 12] = ["a", "b", "c", "d", "e", "f", "g", "h", "i", "j", "k", "l"];
    let vocab = super::Vocab::from_tokens(["<usr>", "<sys>"].into_iter().chain(WORDS).map(String::from));
    let model = Model::init(vocab, dim, 128, seed)?;
    let mut rng = crate::seeded_rng(seed, 9);
    let text = |rng: &mut rand_chacha::ChaCha8Rng| {
        let n = rng.gen_range(1..=5);
        (0..n).map(|_| WORDS[rng.gen_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
    };
    let examples = (0..batch)
        .map(|i| {
            let label = u8::from(i % 2 == 0);
            let utterances = (0..rng.gen_range(1..=3))
                .map(|t| {
                    let speaker = if t % 2 == 0 { Speaker::User } else { Speaker::System };
                    Utterance::new(speaker, text(&mut rng))
                })
                .collect();
            LabeledExample {
                context: Context::from_utterances(format!("g{i}"), utterances),
                response: text(&mut rng),
                label,
                origin: if label == 1 { Origin::Gold } else { Origin::RandomNegative },
            }
        })
        .collect();
    Ok((model, examples))
}
