//! AdamW with linear warmup and linear decay.

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::grad::{Objective, TripletAveraging, TripletConfig};
use super::params::DECAYED;
use super::{Distance, EncoderParams, Mode, Model, DEFAULT_DIM, DEFAULT_MAX_SEQ_LEN};
use crate::error::{Error, Result};
use crate::seeded_rng;
use crate::staging::LabeledExample;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Classification,
    Triplet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub margin: f64,
    pub max_seq_len: usize,
    pub mode: Mode,
    pub distance: Distance,
    pub triplet_averaging: TripletAveraging,
    pub dim: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-3,
            warmup_fraction: 0.1,
            weight_decay: 0.01,
            epochs: 5,
            batch_size: 64,
            margin: 5.0,
            max_seq_len: DEFAULT_MAX_SEQ_LEN,
            mode: Mode::Cross,
            distance: Distance::Euclidean,
            triplet_averaging: TripletAveraging::PositiveOnly,
            dim: DEFAULT_DIM,
            seed: 13,
        }
    }
}

impl TrainConfig {
    /// Defaults with the batch size used for `kind`: 64 for classification,
    /// 128 for triplet fine-tuning.
    pub fn for_loss(kind: LossKind) -> Self {
        TrainConfig {
            batch_size: match kind {
                LossKind::Classification => 64,
                LossKind::Triplet => 128,
            },
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must be in [0, 1)");
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.margin.is_nan() || self.margin <= 0.0 {
            return bad("margin must be positive");
        }
        if self.dim == 0 {
            return bad("dim must be positive");
        }
        if self.max_seq_len < 3 {
            return bad("max_seq_len must be at least 3");
        }
        Ok(())
    }

    pub fn objective(&self, kind: LossKind) -> Objective {
        match kind {
            LossKind::Classification => Objective::Classification(self.mode),
            LossKind::Triplet => Objective::Triplet(TripletConfig {
                margin: self.margin,
                distance: self.distance,
                averaging: self.triplet_averaging,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub epoch_losses: Vec<f64>,
}

/// Learning-rate multiplier at `step` (0-based) of `total`: linear ramp from
/// 0 over the warmup steps, then linear decay to 0.
pub fn lr_multiplier(step: usize, total: usize, warmup: usize) -> f64 {
    if step < warmup {
        step as f64 / warmup as f64
    } else {
        ((total - step) as f64 / (total - warmup).max(1) as f64).max(0.0)
    }
}

struct AdamW {
    m: EncoderParams,
    v: EncoderParams,
    t: i32,
}

impl AdamW {
    fn new(p: &EncoderParams) -> Self {
        AdamW {
            m: p.zeros_like(),
            v: p.zeros_like(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut EncoderParams, grads: &EncoderParams, lr: f64, weight_decay: f64) {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t);
        let bc2 = 1.0 - BETA2.powi(self.t);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
            .zip(DECAYED);
        for ((((p, g), m), v), decayed) in tensors {
            for i in 0..p.len() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                if decayed {
                    p[i] -= lr * weight_decay * p[i];
                }
                p[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Batches of indices for one epoch. Triplet batches draw positives and
/// negatives in proportion so every batch holds both labels whenever each
/// label has at least one example per batch.
fn epoch_batches(data: &[LabeledExample], batch_size: usize, stratify: bool, rng: &mut impl rand::Rng) -> Vec<Vec<usize>> {
    let n_batches = data.len().div_ceil(batch_size);
    if !stratify {
        let mut idx: Vec<usize> = (0..data.len()).collect();
        idx.shuffle(rng);
        return idx.chunks(batch_size).map(<[usize]>::to_vec).collect();
    }
    let mut pos: Vec<usize> = (0..data.len()).filter(|&i| data[i].label == 1).collect();
    let mut neg: Vec<usize> = (0..data.len()).filter(|&i| data[i].label == 0).collect();
    pos.shuffle(rng);
    neg.shuffle(rng);
    let slice = |v: &[usize], b: usize| {
        let lo = b * v.len() / n_batches;
        let hi = (b + 1) * v.len() / n_batches;
        v[lo..hi].to_vec()
    };
    (0..n_batches)
        .map(|b| {
            let mut batch = slice(&pos, b);
            batch.extend(slice(&neg, b));
            batch.shuffle(rng);
            batch
        })
        .collect()
}

/// Runs `epochs x ceil(N / batch_size)` AdamW steps from `model`.
pub fn train(model: &Model, data: &[LabeledExample], cfg: &TrainConfig, kind: LossKind) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if kind == LossKind::Triplet {
        let pos = data.iter().filter(|e| e.label == 1).count();
        if pos == 0 || pos == data.len() {
            return Err(Error::invalid("triplet training needs both labels"));
        }
    }
    let objective = cfg.objective(kind);
    let mut model = model.clone();
    let mut opt = AdamW::new(&model.params);
    let mut rng = seeded_rng(cfg.seed, 0x7a1);
    let per_epoch = data.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * per_epoch;
    let warmup = (cfg.warmup_fraction * total as f64) as usize;
    let mut report = TrainReport {
        steps: 0,
        epoch_losses: Vec::with_capacity(cfg.epochs),
    };
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let mut counted = 0usize;
        for idx in epoch_batches(data, cfg.batch_size, kind == LossKind::Triplet, &mut rng) {
            let lr = cfg.learning_rate * lr_multiplier(report.steps, total, warmup);
            report.steps += 1;
            batch.clear();
            batch.extend(idx.iter().map(|&i| data[i].clone()));
            let single_label = batch.iter().all(|e| e.label == batch[0].label);
            if kind == LossKind::Triplet && single_label {
                continue;
            }
            let (loss, grads) = objective.loss_grad(&model, &batch)?;
            loss_sum += loss;
            counted += 1;
            opt.step(&mut model.params, &grads, lr, cfg.weight_decay);
        }
        let mean = if counted == 0 { 0.0 } else { loss_sum / counted as f64 };
        info!("epoch {}/{} loss {:.6}", epoch + 1, cfg.epochs, mean);
        report.epoch_losses.push(mean);
    }
    model.params.check_finite()?;
    Ok((model, report))
}
