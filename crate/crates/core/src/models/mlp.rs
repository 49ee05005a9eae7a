use super::{argmax, mean_cross_entropy, softmax_into, Batch, Differentiable, Objective};
use crate::error::{Error, Result};
use crate::param::LayerPartition;
use crate::real::Real;
use crate::rng::GaussianStream;

/// Two-layer tanh MLP classifier.
///
/// Layer 0 is `W1 [H × F]` followed by `b1 [H]`; layer 1 is `W2 [C × H]`
/// followed by `b2 [C]`. Nothing is always-active.
#[derive(Debug, Clone)]
pub struct Mlp {
    features: usize,
    hidden: usize,
    classes: usize,
    seed: u64,
    partition: LayerPartition,
}

pub fn make_mlp(feature_dim: usize, hidden: usize, num_classes: usize, seed: u64) -> Result<Mlp> {
    if feature_dim == 0 || hidden == 0 || num_classes == 0 {
        return Err(Error::Argument("MLP sizes must be ≥ 1".into()));
    }
    let partition = LayerPartition::build(
        &[
            hidden * feature_dim + hidden,
            num_classes * hidden + num_classes,
        ],
        0,
    )?;
    Ok(Mlp {
        features: feature_dim,
        hidden,
        classes: num_classes,
        seed,
        partition,
    })
}

struct Views<'a, T> {
    w1: &'a [T],
    b1: &'a [T],
    w2: &'a [T],
    b2: &'a [T],
}

impl Mlp {
    fn views<'a, T>(&self, params: &'a [T]) -> Views<'a, T> {
        let (w1, rest) = params.split_at(self.hidden * self.features);
        let (b1, rest) = rest.split_at(self.hidden);
        let (w2, b2) = rest.split_at(self.classes * self.hidden);
        Views { w1, b1, w2, b2 }
    }

    /// Returns (hidden activations, logits) for every row.
    fn forward<T: Real>(&self, params: &[T], batch: &Batch) -> (Vec<T>, Vec<T>) {
        let v = self.views(params);
        let mut hidden = Vec::with_capacity(batch.rows() * self.hidden);
        let mut logits = Vec::with_capacity(batch.rows() * self.classes);
        for r in 0..batch.rows() {
            let x = batch.row(r);
            let start = hidden.len();
            for h in 0..self.hidden {
                let w = &v.w1[h * self.features..(h + 1) * self.features];
                let mut acc = v.b1[h];
                for (&wj, &xj) in w.iter().zip(x) {
                    acc += wj * T::from_f64(xj);
                }
                hidden.push(acc.tanh());
            }
            let a = &hidden[start..];
            for c in 0..self.classes {
                let w = &v.w2[c * self.hidden..(c + 1) * self.hidden];
                let mut acc = v.b2[c];
                for (&wj, &aj) in w.iter().zip(a) {
                    acc += wj * aj;
                }
                logits.push(acc);
            }
        }
        (hidden, logits)
    }
}

impl<T: Real> Objective<T> for Mlp {
    fn name(&self) -> &str {
        "mlp"
    }

    fn partition(&self) -> &LayerPartition {
        &self.partition
    }

    fn loss(&self, params: &[T], batch: &Batch) -> T {
        let (_, logits) = self.forward(params, batch);
        mean_cross_entropy(&logits, self.classes, batch.class_labels())
    }

    fn init_params(&self, seed: u64) -> Vec<T> {
        let mut out = vec![T::zero(); self.partition.total_len()];
        let mut stream = GaussianStream::new(seed ^ self.seed);
        let n1 = self.hidden * self.features;
        let n2 = self.classes * self.hidden;
        let w2_start = n1 + self.hidden;
        super::fill_normal(
            &mut out[..n1],
            (1.0 / self.features as f64).sqrt(),
            &mut stream,
        );
        super::fill_normal(
            &mut out[w2_start..w2_start + n2],
            (1.0 / self.hidden as f64).sqrt(),
            &mut stream,
        );
        out
    }

    fn accuracy(&self, params: &[T], batch: &Batch) -> Option<f64> {
        let (_, logits) = self.forward(params, batch);
        let correct = logits
            .chunks_exact(self.classes)
            .zip(batch.class_labels())
            .filter(|(row, &label)| argmax(row) == label)
            .count();
        Some(correct as f64 / batch.rows() as f64)
    }
}

impl<T: Real> Differentiable<T> for Mlp {
    fn gradient(&self, params: &[T], batch: &Batch) -> Vec<T> {
        let (hidden, logits) = self.forward(params, batch);
        let v = self.views(params);
        let labels = batch.class_labels();
        let scale = T::one() / T::from_usize(batch.rows());
        let mut grad = vec![T::zero(); params.len()];
        let (g1, rest) = grad.split_at_mut(self.hidden * self.features);
        let (gb1, rest) = rest.split_at_mut(self.hidden);
        let (g2, gb2) = rest.split_at_mut(self.classes * self.hidden);
        let mut dlogits = vec![T::zero(); self.classes];
        let mut dhidden = vec![T::zero(); self.hidden];
        for r in 0..batch.rows() {
            softmax_into(
                &logits[r * self.classes..(r + 1) * self.classes],
                &mut dlogits,
            );
            dlogits[labels[r]] -= T::one();
            let a = &hidden[r * self.hidden..(r + 1) * self.hidden];
            dhidden.iter_mut().for_each(|d| *d = T::zero());
            for c in 0..self.classes {
                let delta = dlogits[c] * scale;
                gb2[c] += delta;
                let w = &v.w2[c * self.hidden..(c + 1) * self.hidden];
                for h in 0..self.hidden {
                    g2[c * self.hidden + h] += delta * a[h];
                    dhidden[h] += delta * w[h];
                }
            }
            let x = batch.row(r);
            for h in 0..self.hidden {
                let pre = dhidden[h] * (T::one() - a[h] * a[h]);
                gb1[h] += pre;
                for (g, &xj) in g1[h * self.features..(h + 1) * self.features]
                    .iter_mut()
                    .zip(x)
                {
                    *g += pre * T::from_f64(xj);
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

    #[test]
    fn zero_network_gives_ln2() {
        let m = make_mlp(3, 4, 2, 0).unwrap();
        let b = Batch::new(
            vec![1.0, 2.0, 3.0, -1.0, 0.0, 4.0],
            3,
            Labels::Classes(vec![0, 1]),
        )
        .unwrap();
        let theta = vec![0.0; Objective::<f64>::dim(&m)];
        assert!((m.loss(&theta, &b) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn seeded_init_replays() {
        let m = make_mlp(3, 4, 2, 11).unwrap();
        let a: Vec<f64> = m.init_params(5);
        let b: Vec<f64> = m.init_params(5);
        assert_eq!(a, b);
        assert_ne!(a, Objective::<f64>::init_params(&m, 6));
    }

    #[test]
    fn two_layers_no_always_active() {
        let m = make_mlp(3, 4, 2, 0).unwrap();
        let p = Objective::<f64>::partition(&m);
        assert_eq!(p.num_layers(), 2);
        assert_eq!(p.always_active_len(), 0);
        assert_eq!(p.total_len(), 3 * 4 + 4 + 2 * 4 + 2);
    }
}
