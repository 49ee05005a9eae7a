use super::{argmax, mean_cross_entropy, softmax_into, Batch, Differentiable, Objective};
use crate::error::{Error, Result};
use crate::param::LayerPartition;
use crate::real::Real;
use crate::rng::GaussianStream;

/// Linear softmax classifier with mean cross-entropy loss.
///
/// Layout: bias `[C]` (always-active), then the row-major weight matrix
/// `[C × F]`. Weight rows are grouped into `layers` contiguous output blocks.
#[derive(Debug, Clone)]
pub struct Logistic {
    features: usize,
    classes: usize,
    seed: u64,
    partition: LayerPartition,
}

pub fn make_logistic(
    feature_dim: usize,
    num_classes: usize,
    layers: usize,
    seed: u64,
) -> Result<Logistic> {
    if feature_dim == 0 || num_classes == 0 || layers == 0 {
        return Err(Error::Argument("logistic sizes must be ≥ 1".into()));
    }
    if layers > num_classes {
        return Err(Error::Argument(format!(
            "{layers} layers exceed {num_classes} output rows"
        )));
    }
    let base = num_classes / layers;
    let extra = num_classes % layers;
    let sizes: Vec<usize> = (0..layers)
        .map(|l| (base + usize::from(l < extra)) * feature_dim)
        .collect();
    Ok(Logistic {
        features: feature_dim,
        classes: num_classes,
        seed,
        partition: LayerPartition::build(&sizes, num_classes)?,
    })
}

impl Logistic {
    pub fn feature_dim(&self) -> usize {
        self.features
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    fn logits<T: Real>(&self, params: &[T], batch: &Batch) -> Vec<T> {
        let (bias, weights) = params.split_at(self.classes);
        let mut out = Vec::with_capacity(batch.rows() * self.classes);
        for r in 0..batch.rows() {
            let x = batch.row(r);
            for c in 0..self.classes {
                let w = &weights[c * self.features..(c + 1) * self.features];
                let mut acc = bias[c];
                for (&wj, &xj) in w.iter().zip(x) {
                    acc += wj * T::from_f64(xj);
                }
                out.push(acc);
            }
        }
        out
    }
}

impl<T: Real> Objective<T> for Logistic {
    fn name(&self) -> &str {
        "logistic"
    }

    fn partition(&self) -> &LayerPartition {
        &self.partition
    }

    fn loss(&self, params: &[T], batch: &Batch) -> T {
        let logits = self.logits(params, batch);
        mean_cross_entropy(&logits, self.classes, batch.class_labels())
    }

    fn init_params(&self, seed: u64) -> Vec<T> {
        let mut out = vec![T::zero(); self.partition.total_len()];
        let mut stream = GaussianStream::new(seed ^ self.seed);
        super::fill_normal(&mut out[self.classes..], 0.01, &mut stream);
        out
    }

    fn accuracy(&self, params: &[T], batch: &Batch) -> Option<f64> {
        let logits = self.logits(params, batch);
        let correct = logits
            .chunks_exact(self.classes)
            .zip(batch.class_labels())
            .filter(|(row, &label)| argmax(row) == label)
            .count();
        Some(correct as f64 / batch.rows() as f64)
    }
}

impl<T: Real> Differentiable<T> for Logistic {
    fn gradient(&self, params: &[T], batch: &Batch) -> Vec<T> {
        let logits = self.logits(params, batch);
        let labels = batch.class_labels();
        let scale = T::one() / T::from_usize(batch.rows());
        let mut grad = vec![T::zero(); params.len()];
        let mut probs = vec![T::zero(); self.classes];
        for r in 0..batch.rows() {
            softmax_into(
                &logits[r * self.classes..(r + 1) * self.classes],
                &mut probs,
            );
            probs[labels[r]] -= T::one();
            let x = batch.row(r);
            let (gb, gw) = grad.split_at_mut(self.classes);
            for c in 0..self.classes {
                let delta = probs[c] * scale;
                gb[c] += delta;
                for (g, &xj) in gw[c * self.features..(c + 1) * self.features]
                    .iter_mut()
                    .zip(x)
                {
                    *g += delta * T::from_f64(xj);
                }
            }
        }
        grad
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Labels;

    fn balanced_batch() -> Batch {
        Batch::new(vec![1.0, -2.0, 0.5, 3.0], 2, Labels::Classes(vec![0, 1])).unwrap()
    }

    #[test]
    fn zero_parameters_give_ln2() {
        let m = make_logistic(2, 2, 2, 0).unwrap();
        let theta = vec![0.0; Objective::<f64>::dim(&m)];
        let loss = m.loss(&theta, &balanced_batch());
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn loss_is_nonnegative() {
        let m = make_logistic(2, 3, 3, 0).unwrap();
        let mut s = GaussianStream::new(1);
        let b = Batch::new(vec![1.0, -2.0, 0.5, 3.0], 2, Labels::Classes(vec![2, 1])).unwrap();
        for _ in 0..50 {
            let mut theta = vec![0.0; Objective::<f64>::dim(&m)];
            crate::models::fill_normal(&mut theta, 5.0, &mut s);
            assert!(m.loss(&theta, &b) >= 0.0);
        }
    }

    #[test]
    fn layers_group_output_rows() {
        let m = make_logistic(4, 5, 2, 0).unwrap();
        let p = Objective::<f64>::partition(&m);
        assert_eq!(p.always_active_len(), 5);
        assert_eq!(p.layers()[0].len, 12);
        assert_eq!(p.layers()[1].len, 8);
        assert!(make_logistic(4, 2, 3, 0).is_err());
    }
}
