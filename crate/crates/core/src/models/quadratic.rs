use super::{Batch, Differentiable, Objective};
use crate::error::{Error, Result};
use crate::param::LayerPartition;
use crate::real::Real;
use crate::rng::GaussianStream;

/// `L(θ) = ½ θᵀAθ` with diagonal positive-definite `A`. Ignores the batch.
#[derive(Debug, Clone)]
pub struct Quadratic {
    eigenvalues: Vec<f64>,
    partition: LayerPartition,
}

/// Eigenvalues log-spaced over `[1, condition_number]`, assigned to
/// coordinates in a seeded random order. `d` is split into `layers` equal
/// layers of `d / layers` elements; the `d % layers` remainder is
/// always-active.
pub fn make_quadratic(
    d: usize,
    layers: usize,
    condition_number: f64,
    seed: u64,
) -> Result<Quadratic> {
    if d == 0 {
        return Err(Error::Argument("quadratic needs d ≥ 1".into()));
    }
    if layers > d {
        return Err(Error::Argument(format!(
            "{layers} layers do not fit in d = {d}"
        )));
    }
    if !(condition_number >= 1.0 && condition_number.is_finite()) {
        return Err(Error::Argument(format!(
            "condition number must be finite and ≥ 1, got {condition_number}"
        )));
    }
    let mut eigenvalues: Vec<f64> = (0..d)
        .map(|i| {
            if d == 1 {
                1.0
            } else {
                condition_number.powf(i as f64 / (d - 1) as f64)
            }
        })
        .collect();
    // Pin the endpoints exactly.
    eigenvalues[0] = 1.0;
    if d > 1 {
        eigenvalues[d - 1] = condition_number;
    }
    let mut stream = GaussianStream::new(seed);
    for i in (1..d).rev() {
        let j = stream.next_below(i as u64 + 1) as usize;
        eigenvalues.swap(i, j);
    }
    let partition = match d.checked_div(layers) {
        None => LayerPartition::build(&[], d)?,
        Some(per) => LayerPartition::build(&vec![per; layers], d % layers)?,
    };
    Quadratic::new(eigenvalues, partition)
}

impl Quadratic {
    pub fn new(eigenvalues: Vec<f64>, partition: LayerPartition) -> Result<Self> {
        if eigenvalues.len() != partition.total_len() {
            return Err(Error::Size(format!(
                "{} eigenvalues for {} parameters",
                eigenvalues.len(),
                partition.total_len()
            )));
        }
        if eigenvalues.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::Argument(
                "eigenvalues must be positive and finite".into(),
            ));
        }
        Ok(Self {
            eigenvalues,
            partition,
        })
    }

    /// Identity Hessian over the given partition.
    pub fn isotropic(partition: LayerPartition) -> Self {
        Self {
            eigenvalues: vec![1.0; partition.total_len()],
            partition,
        }
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Lipschitz constant of the gradient (largest eigenvalue).
    pub fn smoothness(&self) -> f64 {
        self.eigenvalues.iter().copied().fold(0.0, f64::max)
    }

    pub fn gradient_at<T: Real>(&self, params: &[T]) -> Vec<T> {
        params
            .iter()
            .zip(&self.eigenvalues)
            .map(|(&x, &l)| T::from_f64(l) * x)
            .collect()
    }
}

impl<T: Real> Objective<T> for Quadratic {
    fn name(&self) -> &str {
        "quadratic"
    }

    fn partition(&self) -> &LayerPartition {
        &self.partition
    }

    fn loss(&self, params: &[T], _batch: &Batch) -> T {
        let half = T::from_f64(0.5);
        params
            .iter()
            .zip(&self.eigenvalues)
            .map(|(&x, &l)| T::from_f64(l) * x * x)
            .sum::<T>()
            * half
    }

    fn init_params(&self, seed: u64) -> Vec<T> {
        let mut out = vec![T::zero(); self.eigenvalues.len()];
        super::fill_normal(&mut out, 1.0, &mut GaussianStream::new(seed));
        out
    }
}

impl<T: Real> Differentiable<T> for Quadratic {
    fn gradient(&self, params: &[T], _batch: &Batch) -> Vec<T> {
        self.gradient_at(params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_hessian_in_two_dimensions() {
        let q = make_quadratic(2, 1, 1.0, 0).unwrap();
        let b = Batch::unit();
        assert_eq!(Objective::<f64>::loss(&q, &[1.0, 0.0], &b), 0.5);
        assert_eq!(q.gradient(&[1.0, 0.0], &b), vec![1.0, 0.0]);
        assert_eq!(Objective::<f64>::loss(&q, &[0.0, 0.0], &b), 0.0);
        assert_eq!(q.gradient(&[0.0, 0.0], &b), vec![0.0, 0.0]);
    }

    #[test]
    fn condition_number_by_construction() {
        let q = make_quadratic(64, 4, 10.0, 3).unwrap();
        let max = q.eigenvalues().iter().copied().fold(f64::MIN, f64::max);
        let min = q.eigenvalues().iter().copied().fold(f64::MAX, f64::min);
        assert!((max / min - 10.0).abs() < 1e-9);
        assert_eq!(q.smoothness(), max);
    }

    #[test]
    fn remainder_goes_to_always_active() {
        let q = make_quadratic(10, 3, 2.0, 0).unwrap();
        let p = Objective::<f64>::partition(&q);
        assert_eq!(p.always_active_len(), 1);
        assert_eq!(p.num_layers(), 3);
        assert!(p.layers().iter().all(|s| s.len == 3));
    }

    #[test]
    fn invalid_sizes_rejected() {
        assert!(make_quadratic(0, 1, 1.0, 0).is_err());
        assert!(make_quadratic(4, 5, 1.0, 0).is_err());
        assert!(make_quadratic(4, 2, 0.5, 0).is_err());
    }
}
