//! Desk-scale text encoder: token embeddings, mean pooling and a tanh
//! projection, with a two-logit cross-encoder head and a bi-encoder head over
//! `[u; w; |u - w|]`.

mod grad;
mod params;
mod train;
mod vocab;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use grad::{
    checked_objectives, class_loss_grad, grad_check, grad_check_against, loss_only, random_check_problem,
    triplet_loss_grad, Objective, TripletAveraging, TripletConfig,
};
pub use params::{EncoderParams, Matrix};
pub use train::{lr_multiplier, train, LossKind, TrainConfig, TrainReport};
pub use vocab::{build_vocab, Vocab, CLS, PAD, SEP, UNK};

use crate::corpus::Context;
use crate::error::{Error, Result};
use crate::io::{write_atomic, OutputMeta};
use crate::metrics::{tokenize, Embedder};

pub const DEFAULT_MAX_SEQ_LEN: usize = 128;
pub const DEFAULT_DIM: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Cross,
    Bi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    Euclidean,
    Cosine,
}

/// Mean-pooled input and its projection for one token stream.
#[derive(Debug, Clone)]
pub(crate) struct Pooled {
    pub ids: Vec<u32>,
    pub h: Vec<f64>,
    pub e: Vec<f64>,
}

/// Vocabulary, parameters and input limits: everything needed to run the
/// encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub vocab: Vocab,
    pub params: EncoderParams,
    pub max_seq_len: usize,
}

impl Model {
    pub fn new(vocab: Vocab, params: EncoderParams, max_seq_len: usize) -> Result<Self> {
        if params.vocab_size() != vocab.len() {
            return Err(Error::invalid(format!(
                "embedding rows {} != vocabulary size {}",
                params.vocab_size(),
                vocab.len()
            )));
        }
        if max_seq_len < 3 {
            return Err(Error::invalid("max_seq_len must be at least 3"));
        }
        Ok(Model {
            vocab,
            params,
            max_seq_len,
        })
    }

    /// Randomly initialised model over `vocab`.
    pub fn init(vocab: Vocab, dim: usize, max_seq_len: usize, seed: u64) -> Result<Self> {
        let params = EncoderParams::init(vocab.len(), dim, seed);
        Model::new(vocab, params, max_seq_len)
    }

    pub fn dim(&self) -> usize {
        self.params.dim()
    }

    fn context_tokens(&self, c: &Context) -> Vec<u32> {
        let mut ids = Vec::new();
        for u in &c.utterances {
            ids.push(self.vocab.id(u.speaker.tag()));
            ids.extend(tokenize(&u.text).tokens.iter().map(|t| self.vocab.id(t)));
        }
        ids
    }

    fn text_tokens(&self, text: &str) -> Vec<u32> {
        tokenize(text).tokens.iter().map(|t| self.vocab.id(t)).collect()
    }

    /// `[CLS] context [SEP] response [SEP]`, dropping the oldest context
    /// tokens first when over `max_seq_len`. A response that alone exceeds
    /// the limit keeps its leading tokens.
    pub fn pair_ids(&self, c: &Context, response: &str) -> Vec<u32> {
        let ctx = self.context_tokens(c);
        let mut resp = self.text_tokens(response);
        resp.truncate(self.max_seq_len - 3);
        let budget = self.max_seq_len - 3 - resp.len();
        let ctx = &ctx[ctx.len().saturating_sub(budget)..];
        let mut ids = Vec::with_capacity(ctx.len() + resp.len() + 3);
        ids.push(Vocab::CLS_ID);
        ids.extend_from_slice(ctx);
        ids.push(Vocab::SEP_ID);
        ids.extend(resp);
        ids.push(Vocab::SEP_ID);
        ids
    }

    /// Bi-encoder context stream `[CLS] context [SEP]`.
    pub fn context_ids(&self, c: &Context) -> Vec<u32> {
        let ctx = self.context_tokens(c);
        let keep = self.max_seq_len - 2;
        wrap(&ctx[ctx.len().saturating_sub(keep)..])
    }

    /// Single-text stream `[CLS] text [SEP]`.
    pub fn text_ids(&self, text: &str) -> Vec<u32> {
        let mut t = self.text_tokens(text);
        t.truncate(self.max_seq_len - 2);
        wrap(&t)
    }

    pub(crate) fn pool(&self, ids: &[u32]) -> Pooled {
        let p = &self.params;
        let d = p.dim();
        let mut h = vec![0.0; d];
        for &id in ids {
            for (acc, x) in h.iter_mut().zip(p.embeddings.row(id as usize)) {
                *acc += x;
            }
        }
        let n = ids.len().max(1) as f64;
        h.iter_mut().for_each(|x| *x /= n);
        let mut e = p.proj_w.matvec(&h);
        for (x, b) in e.iter_mut().zip(&p.proj_b) {
            *x = (*x + b).tanh();
        }
        Pooled {
            ids: ids.to_vec(),
            h,
            e,
        }
    }

    /// Joint encoding of a (context, response) pair.
    pub fn encode_pair(&self, c: &Context, response: &str) -> Vec<f64> {
        self.pool(&self.pair_ids(c, response)).e
    }

    /// Separate context and response encodings with shared weights.
    pub fn encode_bi(&self, c: &Context, response: &str) -> (Vec<f64>, Vec<f64>) {
        (
            self.pool(&self.context_ids(c)).e,
            self.pool(&self.text_ids(response)).e,
        )
    }

    pub fn encode_text(&self, text: &str) -> Vec<f64> {
        self.pool(&self.text_ids(text)).e
    }

    /// Cross-encoder (P(l=0), P(l=1)).
    pub fn classify(&self, c: &Context, response: &str) -> [f64; 2] {
        let e = self.encode_pair(c, response);
        softmax2(self.params.cls_logits(&e))
    }

    /// Bi-encoder (P(l=0), P(l=1)).
    pub fn biencoder_classify(&self, c: &Context, response: &str) -> [f64; 2] {
        let (u, w) = self.encode_bi(c, response);
        softmax2(self.params.bi_logits(&bi_features(&u, &w)))
    }

    pub fn classify_with(&self, mode: Mode, c: &Context, response: &str) -> [f64; 2] {
        match mode {
            Mode::Cross => self.classify(c, response),
            Mode::Bi => self.biencoder_classify(c, response),
        }
    }
}

impl Embedder for Model {
    fn embed(&self, text: &str) -> Vec<f64> {
        self.encode_text(text)
    }
}

fn wrap(inner: &[u32]) -> Vec<u32> {
    let mut ids = Vec::with_capacity(inner.len() + 2);
    ids.push(Vocab::CLS_ID);
    ids.extend_from_slice(inner);
    ids.push(Vocab::SEP_ID);
    ids
}

pub(crate) fn bi_features(u: &[f64], w: &[f64]) -> Vec<f64> {
    let mut f = Vec::with_capacity(3 * u.len());
    f.extend_from_slice(u);
    f.extend_from_slice(w);
    f.extend(u.iter().zip(w).map(|(a, b)| (a - b).abs()));
    f
}

pub fn softmax2(logits: [f64; 2]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let a = (logits[0] - m).exp();
    let b = (logits[1] - m).exp();
    let z = a + b;
    [a / z, b / z]
}

/// Saved model plus the configuration that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub meta: Option<OutputMeta>,
    pub train_config: Option<TrainConfig>,
    pub model: Model,
}

impl Checkpoint {
    pub fn new(model: Model, train_config: Option<TrainConfig>, meta: Option<OutputMeta>) -> Self {
        Checkpoint {
            format_version: crate::FORMAT_VERSION,
            meta,
            train_config,
            model,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.format_version != crate::FORMAT_VERSION {
            return Err(Error::invalid(format!(
                "checkpoint format {} unsupported (expected {})",
                ck.format_version,
                crate::FORMAT_VERSION
            )));
        }
        ck.model.params.check_finite()?;
        Model::new(ck.model.vocab.clone(), ck.model.params.clone(), ck.model.max_seq_len)?;
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Speaker, Utterance};
    use approx::assert_abs_diff_eq;

    fn model(dim: usize, max_len: usize) -> Model {
        let vocab = Vocab::from_tokens(
            ["<usr>", "<sys>", "a", "b", "c", "hello", "there"].map(String::from),
        );
        Model::init(vocab, dim, max_len, 5).unwrap()
    }

    fn ctx(texts: &[&str]) -> Context {
        Context::from_utterances(
            "c",
            texts
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let sp = if i % 2 == 0 { Speaker::User } else { Speaker::System };
                    Utterance::new(sp, *t)
                })
                .collect(),
        )
    }

    #[test]
    fn pair_stream_layout() {
        let m = model(4, 128);
        let ids = m.pair_ids(&ctx(&["a b"]), "c");
        let v = &m.vocab;
        assert_eq!(
            ids,
            vec![Vocab::CLS_ID, v.id("<usr>"), v.id("a"), v.id("b"), Vocab::SEP_ID, v.id("c"), Vocab::SEP_ID]
        );
        assert_eq!(m.pair_ids(&ctx(&["zzz"]), "c")[2], Vocab::UNK_ID);
    }

    #[test]
    fn encoding_shape_and_determinism() {
        let m = model(6, 128);
        let c = ctx(&["hello there", "a b c"]);
        assert_eq!(m.encode_pair(&c, "a"), m.encode_pair(&c, "a"));
        for r in ["", "a", "a b c a b c a b c"] {
            assert_eq!(m.encode_pair(&c, r).len(), 6);
        }
        // all-UNK input still encodes
        assert_eq!(m.encode_pair(&ctx(&["qq"]), "rr").len(), 6);
    }

    #[test]
    fn truncation_drops_oldest_context() {
        let m = model(6, 10);
        let long: Vec<&str> = vec!["a b c a b c a b c", "hello there"];
        let changed: Vec<&str> = vec!["c b c a b c a b c", "hello there"];
        let r = "a b";
        let ids = m.pair_ids(&ctx(&long), r);
        assert_eq!(ids.len(), 10);
        assert_eq!(m.encode_pair(&ctx(&long), r), m.encode_pair(&ctx(&changed), r));
        // response longer than the limit keeps its head and drops all context
        let ids = m.pair_ids(&ctx(&long), "a a a a a a a a a a a a");
        assert_eq!(ids.len(), 10);
        assert_eq!(ids[1], Vocab::SEP_ID);
    }

    #[test]
    fn classify_normalises() {
        let m = model(5, 128);
        let c = ctx(&["hello"]);
        let p = m.classify(&c, "there");
        assert_abs_diff_eq!(p[0] + p[1], 1.0, epsilon = 1e-12);
        assert!(p[0] > 0.0 && p[1] > 0.0);
        let p = m.biencoder_classify(&c, "there");
        assert_abs_diff_eq!(p[0] + p[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_heads_give_uniform() {
        let mut m = model(5, 128);
        m.params.cls_w.fill(0.0);
        m.params.cls_b = vec![0.0; 2];
        m.params.bi_w.fill(0.0);
        m.params.bi_b = vec![0.0; 2];
        let c = ctx(&["a"]);
        assert_eq!(m.classify(&c, "b"), [0.5, 0.5]);
        assert_eq!(m.biencoder_classify(&c, "b"), [0.5, 0.5]);
    }

    #[test]
    fn softmax_closed_form() {
        let p = softmax2([0.0, 3f64.ln()]);
        assert_abs_diff_eq!(p[0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 0.75, epsilon = 1e-12);
        let p = softmax2([1000.0, -1000.0]);
        assert!(p[0] == 1.0 && p[1] >= 0.0);
    }

    #[test]
    fn biencoder_swap_symmetry() {
        let mut m = model(4, 128);
        let d = 4;
        // identical weights on the u and w blocks, zero on |u - w|
        for row in 0..2 {
            for k in 0..d {
                let v = 0.3 * (row as f64 + 1.0) - 0.1 * k as f64;
                m.params.bi_w.set(row, k, v);
                m.params.bi_w.set(row, d + k, v);
                m.params.bi_w.set(row, 2 * d + k, 0.0);
            }
        }
        let a = ctx(&["hello there"]);
        let (u, w) = m.encode_bi(&a, "a b");
        let swapped = m.params.bi_logits(&bi_features(&w, &u));
        assert_eq!(softmax2(m.params.bi_logits(&bi_features(&u, &w))), softmax2(swapped));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let ck = Checkpoint::new(model(3, 64), Some(TrainConfig::default()), None);
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }
}
