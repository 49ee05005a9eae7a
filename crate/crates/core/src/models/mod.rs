//! Forward-only objectives sized for desk-scale experiments.
//!
//! Every model exposes a [`LayerPartition`] over its flat parameter vector
//! and a deterministic loss. Hand-derived gradients are provided through the
//! separate [`Differentiable`] trait; the optimizer only ever sees
//! [`Objective`].

mod data;
mod logistic;
mod mlp;
mod quadratic;
mod transformer;

pub use data::{load_dataset, sample_batch, Dataset, DatasetKind, DatasetSpec};
pub use logistic::{make_logistic, Logistic};
pub use mlp::{make_mlp, Mlp};
pub use quadratic::{make_quadratic, Quadratic};
pub use transformer::{make_tiny_transformer, TinyTransformer, TransformerShape};

use crate::error::{Error, Result};
use crate::param::LayerPartition;
use crate::real::Real;

/// Per-sample supervision.
#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    Classes(Vec<usize>),
    Targets(Vec<f64>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Classes(c) => c.len(),
            Labels::Targets(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> Option<&[usize]> {
        match self {
            Labels::Classes(c) => Some(c),
            Labels::Targets(_) => None,
        }
    }
}

/// A mini-batch: row-major `rows × cols` inputs plus one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    inputs: Vec<f64>,
    rows: usize,
    cols: usize,
    labels: Labels,
}

impl Batch {
    pub fn new(inputs: Vec<f64>, cols: usize, labels: Labels) -> Result<Self> {
        let rows = labels.len();
        if rows == 0 {
            return Err(Error::Argument(
                "batch must contain at least one row".into(),
            ));
        }
        if inputs.len() != rows * cols {
            return Err(Error::Size(format!(
                "{} inputs for {rows} rows of width {cols}",
                inputs.len()
            )));
        }
        Ok(Self {
            inputs,
            rows,
            cols,
            labels,
        })
    }

    /// A one-row batch without features, for objectives that ignore data.
    pub fn unit() -> Self {
        Self {
            inputs: Vec::new(),
            rows: 1,
            cols: 0,
            labels: Labels::Targets(vec![0.0]),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.cols..(i + 1) * self.cols]
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn labels(&self) -> &Labels {
        &self.labels
    }

    pub(crate) fn class_labels(&self) -> &[usize] {
        self.labels
            .classes()
            .expect("classifier objectives need class labels")
    }
}

/// A forward-only loss `L(θ; B)` over a partitioned parameter vector.
///
/// Implementations must be deterministic: equal `(params, batch)` give
/// bit-equal losses. Evaluation never mutates `params`.
pub trait Objective<T: Real = f64>: Send + Sync {
    fn name(&self) -> &str;

    fn partition(&self) -> &LayerPartition;

    fn loss(&self, params: &[T], batch: &Batch) -> T;

    /// Deterministic initial parameters.
    fn init_params(&self, seed: u64) -> Vec<T>;

    /// Classification accuracy in [0, 1], or `None` for non-classifiers.
    fn accuracy(&self, _params: &[T], _batch: &Batch) -> Option<f64> {
        None
    }

    fn dim(&self) -> usize {
        self.partition().total_len()
    }

    fn num_layers(&self) -> usize {
        self.partition().num_layers()
    }
}

/// Analytic gradient of an [`Objective`]. Used by oracles only.
pub trait Differentiable<T: Real = f64>: Objective<T> {
    fn gradient(&self, params: &[T], batch: &Batch) -> Vec<T>;
}

/// Numerically stable mean cross-entropy over rows of `logits`.
pub(crate) fn mean_cross_entropy<T: Real>(logits: &[T], classes: usize, labels: &[usize]) -> T {
    let mut total = T::zero();
    for (row, &label) in logits.chunks_exact(classes).zip(labels) {
        total += log_sum_exp(row) - row[label];
    }
    total / T::from_usize(labels.len())
}

pub(crate) fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Softmax of `row` written into `out`.
pub(crate) fn softmax_into<T: Real>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub(crate) fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Fills `out` with N(0, std²) draws from a dedicated stream.
pub(crate) fn fill_normal<T: Real>(
    out: &mut [T],
    std: f64,
    stream: &mut crate::rng::GaussianStream,
) {
    use crate::rng::NormalSource;
    for v in out {
        *v = T::from_f64(std * stream.next_normal());
    }
}
