use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeded_rng;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    fn uniform<R: Rng>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        Matrix {
            rows,
            cols,
            data: (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect(),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn fill(&mut self, v: f64) {
        self.data.fill(v);
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|r| self.row(r).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `self^T y`.
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(r)) {
                *o += a * yr;
            }
        }
        out
    }

    /// `self += a b^T`.
    pub fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        for (r, &ar) in a.iter().enumerate() {
            for (x, bc) in self.row_mut(r).iter_mut().zip(b) {
                *x += ar * bc;
            }
        }
    }
}

/// Every trainable tensor of the encoder and its two heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    /// V x d token embeddings.
    pub embeddings: Matrix,
    /// d x d projection applied to the pooled embedding.
    pub proj_w: Matrix,
    pub proj_b: Vec<f64>,
    /// 2 x d cross-encoder head.
    pub cls_w: Matrix,
    pub cls_b: Vec<f64>,
    /// 2 x 3d bi-encoder head.
    pub bi_w: Matrix,
    pub bi_b: Vec<f64>,
}

pub const TENSOR_NAMES: [&str; 7] = ["embeddings", "proj_w", "proj_b", "cls_w", "cls_b", "bi_w", "bi_b"];
/// Which entries of [`TENSOR_NAMES`] receive weight decay.
pub const DECAYED: [bool; 7] = [true, true, false, true, false, true, false];

impl EncoderParams {
    pub fn zeros(vocab_size: usize, dim: usize) -> Self {
        EncoderParams {
            embeddings: Matrix::zeros(vocab_size, dim),
            proj_w: Matrix::zeros(dim, dim),
            proj_b: vec![0.0; dim],
            cls_w: Matrix::zeros(2, dim),
            cls_b: vec![0.0; 2],
            bi_w: Matrix::zeros(2, 3 * dim),
            bi_b: vec![0.0; 2],
        }
    }

    /// Uniform embeddings in (-1, 1); Glorot-uniform weights; zero biases.
    pub fn init(vocab_size: usize, dim: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed, 0x5eed);
        let glorot = |fan_in: usize, fan_out: usize| (6.0 / (fan_in + fan_out) as f64).sqrt();
        EncoderParams {
            embeddings: Matrix::uniform(vocab_size, dim, 1.0, &mut rng),
            proj_w: Matrix::uniform(dim, dim, glorot(dim, dim), &mut rng),
            proj_b: vec![0.0; dim],
            cls_w: Matrix::uniform(2, dim, glorot(dim, 2), &mut rng),
            cls_b: vec![0.0; 2],
            bi_w: Matrix::uniform(2, 3 * dim, glorot(3 * dim, 2), &mut rng),
            bi_b: vec![0.0; 2],
        }
    }

    pub fn zeros_like(&self) -> Self {
        EncoderParams::zeros(self.vocab_size(), self.dim())
    }

    pub fn dim(&self) -> usize {
        self.proj_w.rows
    }

    pub fn vocab_size(&self) -> usize {
        self.embeddings.rows
    }

    pub fn cls_logits(&self, e: &[f64]) -> [f64; 2] {
        let z = self.cls_w.matvec(e);
        [z[0] + self.cls_b[0], z[1] + self.cls_b[1]]
    }

    pub fn bi_logits(&self, features: &[f64]) -> [f64; 2] {
        let z = self.bi_w.matvec(features);
        [z[0] + self.bi_b[0], z[1] + self.bi_b[1]]
    }

    /// Tensors in [`TENSOR_NAMES`] order.
    pub fn tensors(&self) -> [&[f64]; 7] {
        [
            &self.embeddings.data,
            &self.proj_w.data,
            &self.proj_b,
            &self.cls_w.data,
            &self.cls_b,
            &self.bi_w.data,
            &self.bi_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 7] {
        [
            &mut self.embeddings.data,
            &mut self.proj_w.data,
            &mut self.proj_b,
            &mut self.cls_w.data,
            &mut self.cls_b,
            &mut self.bi_w.data,
            &mut self.bi_b,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in TENSOR_NAMES.iter().zip(self.tensors()) {
            if t.iter().any(|x| !x.is_finite()) {
                return Err(Error::Invariant(format!("non-finite entry in {name}")));
            }
        }
        let d = self.dim();
        let consistent = self.embeddings.cols == d
            && self.proj_w.cols == d
            && self.proj_b.len() == d
            && (self.cls_w.rows, self.cls_w.cols) == (2, d)
            && self.cls_b.len() == 2
            && (self.bi_w.rows, self.bi_w.cols) == (2, 3 * d)
            && self.bi_b.len() == 2;
        if !consistent {
            return Err(Error::Invariant("inconsistent tensor dimensions".into()));
        }
        Ok(())
    }

    /// `self += scale * other`.
    pub fn axpy(&mut self, scale: f64, other: &EncoderParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_ops() {
        let mut m = Matrix::zeros(2, 3);
        m.data = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(m.matvec(&[1.0, 0.0, -1.0]), vec![-2.0, -2.0]);
        assert_eq!(m.matvec_t(&[1.0, 1.0]), vec![5.0, 7.0, 9.0]);
        m.add_outer(&[1.0, 0.0], &[1.0, 1.0, 1.0]);
        assert_eq!(m.row(0), &[2.0, 3.0, 4.0]);
    }

    #[test]
    fn init_is_seeded_and_consistent() {
        let a = EncoderParams::init(10, 4, 1);
        assert_eq!(a, EncoderParams::init(10, 4, 1));
        assert_ne!(a, EncoderParams::init(10, 4, 2));
        a.check_finite().unwrap();
        assert_eq!(a.num_params(), 40 + 16 + 4 + 8 + 2 + 24 + 2);
        let mut b = a.clone();
        b.proj_b[0] = f64::NAN;
        assert!(b.check_finite().is_err());
    }
}
