//! Dense f64 arrays with reverse-mode automatic differentiation.
//!
//! The engine is deliberately small: the layer kinds, losses, and optimizer
//! that the two grading networks need, nothing more. Everything is 64-bit
//! and single-threaded inside one computation, which keeps results
//! bit-reproducible across runs and thread counts.

pub mod checkpoint;
pub mod gradcheck;
pub mod net;
pub mod optim;
pub mod tape;

pub use net::{LayerSpec, Network};
pub use optim::Sgd;
pub use tape::{Tape, ValueId};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("layer {index} ({kind}): {source}")]
    InLayer {
        index: usize,
        kind: String,
        #[source]
        source: Box<TensorError>,
    },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("learning rate must be > 0, got {0}")]
    BadLearningRate(f64),
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid layer spec: {0}")]
    BadSpec(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// N-dimensional row-major array of f64 with optional gradient storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    /// Same length as `data` when present.
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
}

impl Tensor {
    /// Build from shape and data; `product(shape)` must equal `data.len()`.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ShapeMismatch {
                op: "Tensor::new",
                detail: format!("shape {:?} does not describe {} elements", shape, data.len()),
            });
        }
        Ok(Self { shape, data, grad: None, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Self { shape, data: vec![0.0; numel], grad: None, requires_grad: false }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], data: vec![v], grad: None, requires_grad: false }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    /// Add `delta` into the gradient buffer, allocating zeros on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.data.len());
        let g = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Row-wise softmax with max subtraction; rows of length `k`.
pub fn softmax_rows(logits: &[f64], k: usize) -> Vec<f64> {
    debug_assert!(k > 0 && logits.len() % k == 0);
    let mut out = vec![0.0; logits.len()];
    for (row, orow) in logits.chunks_exact(k).zip(out.chunks_exact_mut(k)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &z) in orow.iter_mut().zip(row) {
            *o = (z - m).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    out
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_shape() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = softmax_rows(&[1.0, 2.0, 3.0, -5.0, 0.0, 5.0], 3);
        for row in p.chunks_exact(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(1e9), 1.0);
        assert_eq!(sigmoid(-1e9), 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }
}
