//! Test-set evaluation.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::Result;
use crate::net::Network;
use crate::tensor::{argmax, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Percent.
    pub accuracy: f64,
    pub error: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Rows whose argmax equals the label.
pub fn correct<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    labels.iter().enumerate().filter(|&(i, &y)| argmax(logits.row(i)) == y).count()
}

pub fn evaluate_logits<T: Scalar>(logits: &Tensor<T>, labels: &[usize], classes: usize) -> Evaluation {
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (i, &y) in labels.iter().enumerate() {
        confusion[y][argmax(logits.row(i))] += 1;
    }
    let hits: usize = (0..classes).map(|k| confusion[k][k]).sum();
    let accuracy = if labels.is_empty() {
        0.0
    } else {
        100.0 * hits as f64 / labels.len() as f64
    };
    Evaluation {
        accuracy,
        error: 100.0 - accuracy,
        confusion,
    }
}

pub const EVAL_CHUNK: usize = 256;

/// Eval-mode forward over the whole dataset.
pub fn evaluate(net: &Network<f32>, ds: &Dataset) -> Result<Evaluation> {
    let mut rows = Vec::with_capacity(ds.len() * net.num_classes());
    for start in (0..ds.len()).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(ds.len())).collect();
        let (x, _) = ds.gather(&idx)?;
        rows.extend_from_slice(net.forward_eval(&x)?.data());
    }
    let logits = Tensor::new(vec![ds.len(), net.num_classes()], rows)?;
    Ok(evaluate_logits(&logits, &ds.labels, ds.classes()))
}
