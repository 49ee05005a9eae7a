//! Zeroth-order optimizer: SPSA projected gradients computed in place, and
//! ZO-SGD / layer-wise sparse ZO-SGD (LeZO) updates.
//!
//! A step never stores its perturbation direction. The direction is a pure
//! function of the step seed and is regenerated by resetting a
//! [`NormalSource`] before each pass:
//!
//! 1. perturb `+μ z`, evaluate `ℓ+`
//! 2. perturb `-2μ z`, evaluate `ℓ-`
//! 3. perturb `+μ z` (restore)
//! 4. `g = (ℓ+ - ℓ-) / 2μ`, then `θ_i -= η g z_i` with the stream reset again
//!
//! Every pass walks the active elements in canonical order (always-active
//! ranges, then non-dropped layers ascending, elements ascending) and draws
//! exactly one normal per active element. Dropped layers consume no draws
//! and are never written.

use std::time::Instant;

use crate::alloc::{self, AllocationLedger};
use crate::error::{Error, Result};
use crate::models::{Batch, Objective};
use crate::param::{LayerPartition, LayerSet, ParameterVector};
use crate::real::Real;
use crate::rng::{GaussianStream, NormalSource, SeedPurpose, SeedSchedule};

/// Everything that determines one perturbation pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationSpec {
    pub seed: u64,
    pub scale: f64,
    pub dropped: LayerSet,
}

impl PerturbationSpec {
    pub fn new(seed: u64, scale: f64, dropped: LayerSet) -> Self {
        Self {
            seed,
            scale,
            dropped,
        }
    }

    pub fn validate(&self, partition: &LayerPartition) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Argument(format!(
                "perturbation scale must be finite and > 0, got {}",
                self.scale
            )));
        }
        partition.check_dropped(&self.dropped)
    }
}

/// Hyper-parameters of a ZO-SGD / LeZO run. The learning rate is constant.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub mu: f64,
    pub steps: usize,
    /// Layers dropped per step; `0` is plain ZO-SGD.
    pub drop_count: usize,
    pub batch_size: usize,
    pub base_seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            mu: 1e-3,
            steps: 1000,
            drop_count: 0,
            batch_size: 16,
            base_seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Argument(format!(
                "learning_rate must be finite and > 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(Error::Argument(format!(
                "mu must be finite and > 0, got {}",
                self.mu
            )));
        }
        if self.drop_count > num_layers {
            return Err(Error::Argument(format!(
                "drop_count {} exceeds {num_layers} layers",
                self.drop_count
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Argument("batch_size must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Result of one SPSA cycle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpsaEstimate {
    pub projected_grad: f64,
    pub loss_plus: f64,
    pub loss_minus: f64,
}

/// Per-step log: losses, projected gradient, phase timings, allocation.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss_plus: f64,
    pub loss_minus: f64,
    pub projected_grad: f64,
    pub dropped: LayerSet,
    pub time_forward_ns: u64,
    pub time_perturb_ns: u64,
    pub time_update_ns: u64,
    /// Wall time of the whole step, including layer selection and bookkeeping.
    pub time_total_ns: u64,
    /// `None` when no allocation observer is installed.
    pub alloc_delta_bytes: Option<usize>,
}

#[derive(Debug, Default, Clone, Copy)]
struct PhaseTimes {
    forward: u64,
    perturb: u64,
}

fn elapsed_ns(since: Instant) -> u64 {
    since.elapsed().as_nanos() as u64
}

/// Uniform random `n`-subset of `{0, …, N-1}` (partial Fisher–Yates on a
/// stream seeded with `seed`).
pub fn select_dropped_layers(num_layers: usize, n: usize, seed: u64) -> Result<LayerSet> {
    if n > num_layers {
        return Err(Error::Argument(format!(
            "cannot drop {n} of {num_layers} layers"
        )));
    }
    if n == 0 {
        return Ok(LayerSet::empty());
    }
    let mut stream = GaussianStream::new(seed);
    let mut order: Vec<usize> = (0..num_layers).collect();
    for i in 0..n {
        let j = i + stream.next_below((num_layers - i) as u64) as usize;
        order.swap(i, j);
    }
    order.truncate(n);
    Ok(LayerSet::from_indices(order))
}

/// `θ_i += scale · z_i` over active elements in canonical order, with the
/// source reset to `seed` first.
fn perturb_in_place<T: Real, S: NormalSource>(
    values: &mut [T],
    partition: &LayerPartition,
    dropped: &LayerSet,
    seed: u64,
    scale: f64,
    source: &mut S,
) {
    source.reset(seed);
    let scale = T::from_f64(scale);
    for range in partition.active_segments(dropped) {
        for v in &mut values[range] {
            *v += scale * T::from_f64(source.next_normal());
        }
    }
}

/// `θ_i -= coeff · z_i`, same order and stream discipline as a perturbation.
fn update_in_place<T: Real, S: NormalSource>(
    values: &mut [T],
    partition: &LayerPartition,
    dropped: &LayerSet,
    seed: u64,
    coeff: f64,
    source: &mut S,
) {
    source.reset(seed);
    let coeff = T::from_f64(coeff);
    for range in partition.active_segments(dropped) {
        for v in &mut values[range] {
            *v -= coeff * T::from_f64(source.next_normal());
        }
    }
}

fn check_partition<T: Real, L: Objective<T> + ?Sized>(
    pv: &ParameterVector<T>,
    loss: &L,
) -> Result<()> {
    if pv.partition() != loss.partition() {
        return Err(Error::Argument(
            "parameter vector partition does not match the objective".into(),
        ));
    }
    Ok(())
}

fn evaluate<T: Real, L: Objective<T> + ?Sized>(loss: &L, values: &[T], batch: &Batch) -> f64 {
    alloc::untracked(|| loss.loss(values, batch)).to_f64()
}

/// Applies one perturbation pass with a fresh [`GaussianStream`].
pub fn perturb_parameters<T: Real>(
    pv: &mut ParameterVector<T>,
    spec: &PerturbationSpec,
) -> Result<()> {
    perturb_parameters_with(pv, spec, &mut GaussianStream::new(spec.seed))
}

/// `θ_i += factor · scale · z_i`; the SPSA cycle uses factors `1, -2, 1`.
pub fn perturb_parameters_scaled<T: Real>(
    pv: &mut ParameterVector<T>,
    spec: &PerturbationSpec,
    factor: f64,
) -> Result<()> {
    spec.validate(pv.partition())?;
    let mut source = GaussianStream::new(spec.seed);
    let (values, partition) = pv.split_mut();
    perturb_in_place(
        values,
        partition,
        &spec.dropped,
        spec.seed,
        factor * spec.scale,
        &mut source,
    );
    Ok(())
}

pub fn perturb_parameters_with<T: Real, S: NormalSource>(
    pv: &mut ParameterVector<T>,
    spec: &PerturbationSpec,
    source: &mut S,
) -> Result<()> {
    spec.validate(pv.partition())?;
    let (values, partition) = pv.split_mut();
    perturb_in_place(
        values,
        partition,
        &spec.dropped,
        spec.seed,
        spec.scale,
        source,
    );
    Ok(())
}

/// The three-perturbation SPSA cycle. `θ` is restored (up to rounding) on
/// success and on failure.
pub fn spsa_projected_gradient<T: Real, L: Objective<T> + ?Sized>(
    pv: &mut ParameterVector<T>,
    loss: &L,
    batch: &Batch,
    spec: &PerturbationSpec,
) -> Result<SpsaEstimate> {
    spsa_projected_gradient_with(pv, loss, batch, spec, &mut GaussianStream::new(spec.seed))
}

pub fn spsa_projected_gradient_with<T: Real, L: Objective<T> + ?Sized, S: NormalSource>(
    pv: &mut ParameterVector<T>,
    loss: &L,
    batch: &Batch,
    spec: &PerturbationSpec,
    source: &mut S,
) -> Result<SpsaEstimate> {
    spec.validate(pv.partition())?;
    check_partition(pv, loss)?;
    let mut times = PhaseTimes::default();
    spsa_cycle(pv, loss, batch, spec, source, &mut times)
}

fn spsa_cycle<T: Real, L: Objective<T> + ?Sized, S: NormalSource>(
    pv: &mut ParameterVector<T>,
    loss: &L,
    batch: &Batch,
    spec: &PerturbationSpec,
    source: &mut S,
    times: &mut PhaseTimes,
) -> Result<SpsaEstimate> {
    let mu = spec.scale;
    let (values, partition) = pv.split_mut();
    let dropped = &spec.dropped;

    let t = Instant::now();
    perturb_in_place(values, partition, dropped, spec.seed, mu, source);
    times.perturb += elapsed_ns(t);

    let t = Instant::now();
    let loss_plus = evaluate(loss, values, batch);
    times.forward += elapsed_ns(t);
    if !loss_plus.is_finite() {
        perturb_in_place(values, partition, dropped, spec.seed, -mu, source);
        return Err(Error::Numeric(format!("loss at θ + μz is {loss_plus}")));
    }

    let t = Instant::now();
    perturb_in_place(values, partition, dropped, spec.seed, -2.0 * mu, source);
    times.perturb += elapsed_ns(t);

    let t = Instant::now();
    let loss_minus = evaluate(loss, values, batch);
    times.forward += elapsed_ns(t);

    let t = Instant::now();
    perturb_in_place(values, partition, dropped, spec.seed, mu, source);
    times.perturb += elapsed_ns(t);
    if !loss_minus.is_finite() {
        return Err(Error::Numeric(format!("loss at θ - μz is {loss_minus}")));
    }

    Ok(SpsaEstimate {
        projected_grad: (loss_plus - loss_minus) / (2.0 * mu),
        loss_plus,
        loss_minus,
    })
}

/// Seeded in-place ZO-SGD / LeZO optimizer.
///
/// Owns the normal source so steps allocate nothing proportional to `d`.
#[derive(Debug, Clone)]
pub struct ZoOptimizer<S: NormalSource = GaussianStream> {
    config: OptimizerConfig,
    schedule: SeedSchedule,
    source: S,
}

impl ZoOptimizer<GaussianStream> {
    pub fn new(config: OptimizerConfig) -> Self {
        let source = GaussianStream::new(config.base_seed);
        Self::with_source(config, source)
    }
}

impl<S: NormalSource> ZoOptimizer<S> {
    pub fn with_source(config: OptimizerConfig, source: S) -> Self {
        Self {
            schedule: SeedSchedule::new(config.base_seed),
            config,
            source,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn source(&self) -> &S {
        &self.source
    }

    pub fn source_mut(&mut self) -> &mut S {
        &mut self.source
    }

    /// Seed of the perturbation direction at step `t`.
    pub fn perturbation_seed(&self, t: usize) -> u64 {
        self.schedule.derive(SeedPurpose::Perturbation, t as u64)
    }

    /// Dropped set at step `t`, drawn from the layer-selection seed.
    pub fn dropped_layers(&self, num_layers: usize, t: usize) -> Result<LayerSet> {
        select_dropped_layers(
            num_layers,
            self.config.drop_count,
            self.schedule.derive(SeedPurpose::LayerSelect, t as u64),
        )
    }

    /// One LeZO step: resample the dropped set, run the SPSA cycle over the
    /// remaining elements, then update exactly those elements.
    pub fn lezo_step<T: Real, L: Objective<T> + ?Sized>(
        &mut self,
        pv: &mut ParameterVector<T>,
        loss: &L,
        batch: &Batch,
        t: usize,
    ) -> Result<StepRecord> {
        self.step(pv, loss, batch, t, true)
    }

    /// One ZO-SGD (MeZO) step: nothing is dropped.
    pub fn mezo_step<T: Real, L: Objective<T> + ?Sized>(
        &mut self,
        pv: &mut ParameterVector<T>,
        loss: &L,
        batch: &Batch,
        t: usize,
    ) -> Result<StepRecord> {
        self.step(pv, loss, batch, t, false)
    }

    fn step<T: Real, L: Objective<T> + ?Sized>(
        &mut self,
        pv: &mut ParameterVector<T>,
        loss: &L,
        batch: &Batch,
        t: usize,
        sparse: bool,
    ) -> Result<StepRecord> {
        if t >= self.config.steps {
            return Err(Error::Argument(format!(
                "step {t} is outside the budget of {} steps",
                self.config.steps
            )));
        }
        check_partition(pv, loss)?;
        self.config.validate(pv.partition().num_layers())?;

        let observer = alloc::observer();
        let mut ledger = AllocationLedger::new();
        ledger.mark_start(&observer);
        let start = Instant::now();

        let dropped = if sparse {
            self.dropped_layers(pv.partition().num_layers(), t)?
        } else {
            LayerSet::empty()
        };
        let spec = PerturbationSpec::new(self.perturbation_seed(t), self.config.mu, dropped);
        let mut times = PhaseTimes::default();
        let estimate = spsa_cycle(pv, loss, batch, &spec, &mut self.source, &mut times)?;

        let t_update = Instant::now();
        let coeff = self.config.learning_rate * estimate.projected_grad;
        let (values, partition) = pv.split_mut();
        update_in_place(
            values,
            partition,
            &spec.dropped,
            spec.seed,
            coeff,
            &mut self.source,
        );
        let time_update_ns = elapsed_ns(t_update);
        let time_total_ns = elapsed_ns(start);

        ledger.mark_end(&observer)?;
        let alloc_delta_bytes = if ledger.is_measured() {
            Some(alloc::step_allocation_delta(&ledger)?)
        } else {
            None
        };

        Ok(StepRecord {
            step: t,
            loss_plus: estimate.loss_plus,
            loss_minus: estimate.loss_minus,
            projected_grad: estimate.projected_grad,
            dropped: spec.dropped,
            time_forward_ns: times.forward,
            time_perturb_ns: times.perturb,
            time_update_ns,
            time_total_ns,
            alloc_delta_bytes,
        })
    }
}

/// Two-sided SPSA estimate with an explicit direction: `(ℓ(θ+μz) − ℓ(θ−μz)) / 2μ · z`.
/// Test support; materializes `z`.
pub fn estimate_gradient_dense<T: Real, L: Objective<T> + ?Sized>(
    pv: &mut ParameterVector<T>,
    loss: &L,
    batch: &Batch,
    mu: f64,
    z: &[T],
) -> Result<Vec<T>> {
    if z.len() != pv.len() {
        return Err(Error::Size(format!(
            "direction has {} entries for {} parameters",
            z.len(),
            pv.len()
        )));
    }
    check_partition(pv, loss)?;
    let values = pv.values_mut();
    let shift = |values: &mut [T], scale: f64| {
        let scale = T::from_f64(scale);
        for (v, &zi) in values.iter_mut().zip(z) {
            *v += scale * zi;
        }
    };
    shift(values, mu);
    let loss_plus = loss.loss(values, batch).to_f64();
    shift(values, -2.0 * mu);
    let loss_minus = loss.loss(values, batch).to_f64();
    shift(values, mu);
    if !(loss_plus.is_finite() && loss_minus.is_finite()) {
        return Err(Error::Numeric(format!(
            "losses ({loss_plus}, {loss_minus}) are not finite"
        )));
    }
    let g = T::from_f64((loss_plus - loss_minus) / (2.0 * mu));
    Ok(z.iter().map(|&zi| g * zi).collect())
}

/// Layer-wise sparse estimate: `z_active` fills the active coordinates in
/// canonical order; dropped coordinates of the result are exactly zero.
pub fn estimate_gradient_sparse<T: Real, L: Objective<T> + ?Sized>(
    pv: &mut ParameterVector<T>,
    loss: &L,
    batch: &Batch,
    mu: f64,
    z_active: &[T],
    dropped: &LayerSet,
) -> Result<Vec<T>> {
    pv.partition().check_dropped(dropped)?;
    let z = scatter_active(pv.partition(), dropped, z_active)?;
    estimate_gradient_dense(pv, loss, batch, mu, &z)
}

/// Expands active-coordinate values into a full vector with zeros on
/// dropped layers.
pub fn scatter_active<T: Real>(
    partition: &LayerPartition,
    dropped: &LayerSet,
    active: &[T],
) -> Result<Vec<T>> {
    let expected = partition.active_len(dropped);
    if active.len() != expected {
        return Err(Error::Size(format!(
            "{} active values for {expected} active coordinates",
            active.len()
        )));
    }
    let mut full = vec![T::zero(); partition.total_len()];
    let mut src = active.iter();
    for range in partition.active_segments(dropped) {
        for (dst, &v) in full[range].iter_mut().zip(&mut src) {
            *dst = v;
        }
    }
    Ok(full)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{make_quadratic, Quadratic};
    use crate::param::build_partition;
    use crate::rng::{FixedDirection, RecordingSource};
    use proptest::prelude::*;

    struct Constant(LayerPartition);

    impl Objective<f64> for Constant {
        fn name(&self) -> &str {
            "constant"
        }
        fn partition(&self) -> &LayerPartition {
            &self.0
        }
        fn loss(&self, _: &[f64], _: &Batch) -> f64 {
            3.5
        }
        fn init_params(&self, _: u64) -> Vec<f64> {
            vec![0.0; self.0.total_len()]
        }
    }

    /// Returns NaN whenever the first coordinate moved above its threshold.
    struct Cliff {
        partition: LayerPartition,
        threshold: f64,
    }

    impl Objective<f64> for Cliff {
        fn name(&self) -> &str {
            "cliff"
        }
        fn partition(&self) -> &LayerPartition {
            &self.partition
        }
        fn loss(&self, p: &[f64], _: &Batch) -> f64 {
            if p[0] > self.threshold {
                f64::NAN
            } else {
                p.iter().sum()
            }
        }
        fn init_params(&self, _: u64) -> Vec<f64> {
            vec![0.0; self.partition.total_len()]
        }
    }

    fn close(a: f64, b: f64, mu: f64) -> bool {
        (a - b).abs() <= 1e-12 * b.abs().max(mu)
    }

    #[test]
    fn drop_none_and_drop_all() {
        assert!(select_dropped_layers(40, 0, 5).unwrap().is_empty());
        assert_eq!(select_dropped_layers(40, 40, 5).unwrap(), LayerSet::all(40));
        assert!(matches!(
            select_dropped_layers(3, 4, 0),
            Err(Error::Argument(_))
        ));
        assert_eq!(
            select_dropped_layers(10, 3, 77).unwrap(),
            select_dropped_layers(10, 3, 77).unwrap()
        );
    }

    #[test]
    fn pair_selection_is_uniform() {
        let (n_layers, seeds) = (8usize, 100_000u64);
        let mut counts = std::collections::HashMap::new();
        for seed in 0..seeds {
            let set = select_dropped_layers(n_layers, 2, crate::rng::mix64(seed)).unwrap();
            assert_eq!(set.len(), 2);
            *counts.entry(set.as_slice().to_vec()).or_insert(0u64) += 1;
        }
        assert_eq!(counts.len(), 28);
        let p = 1.0 / 28.0;
        let expected = seeds as f64 * p;
        let se = (seeds as f64 * p * (1.0 - p)).sqrt();
        let mut chi2 = 0.0;
        // 4σ per cell keeps the family-wise false alarm rate under 0.2%.
        for (pair, &c) in &counts {
            assert!((c as f64 - expected).abs() <= 4.0 * se, "{pair:?}: {c}");
            chi2 += (c as f64 - expected).powi(2) / expected;
        }
        // 27 degrees of freedom: p = 0.001 at χ² = 55.48.
        assert!(chi2 < 55.48, "chi-square {chi2}");
    }

    #[test]
    fn forced_direction_is_exact_on_quadratic() {
        let q = make_quadratic(2, 1, 1.0, 0).unwrap();
        let mut pv =
            ParameterVector::<f64>::new(vec![1.0, 0.0], Objective::<f64>::partition(&q).clone())
                .unwrap();
        let spec = PerturbationSpec::new(0, 1e-3, LayerSet::empty());
        let est = spsa_projected_gradient_with(
            &mut pv,
            &q,
            &Batch::unit(),
            &spec,
            &mut FixedDirection::new(vec![1.0, 0.0]),
        )
        .unwrap();
        assert!(
            (est.projected_grad - 1.0).abs() < 1e-12,
            "{}",
            est.projected_grad
        );
        assert!((pv.values()[0] - 1.0).abs() < 1e-15 && pv.values()[1] == 0.0);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let p = build_partition(&[3, 3], 1).unwrap();
        let mut pv = ParameterVector::new(vec![0.5; 7], p.clone()).unwrap();
        let spec = PerturbationSpec::new(9, 1e-2, LayerSet::empty());
        let est = spsa_projected_gradient(&mut pv, &Constant(p), &Batch::unit(), &spec).unwrap();
        assert_eq!(est.projected_grad, 0.0);
    }

    #[test]
    fn restoration_cycle_by_hand() {
        let p = build_partition(&[4, 4], 2).unwrap();
        let start: Vec<f64> = (0..10).map(|i| 0.3 * i as f64 - 1.0).collect();
        let mut pv = ParameterVector::new(start.clone(), p).unwrap();
        let mu = 1e-3;
        let spec = PerturbationSpec::new(4, mu, LayerSet::empty());
        for factor in [1.0, -2.0, 1.0] {
            perturb_parameters_scaled(&mut pv, &spec, factor).unwrap();
        }
        for (a, b) in pv.values().iter().zip(&start) {
            assert!(close(*a, *b, mu));
        }
    }

    #[test]
    fn all_dropped_without_always_active_is_identity() {
        let p = build_partition(&[3, 2], 0).unwrap();
        let start = vec![1.0, -2.0, 3.0, 0.25, 9.0];
        let mut pv = ParameterVector::new(start.clone(), p.clone()).unwrap();
        perturb_parameters(&mut pv, &PerturbationSpec::new(1, 0.5, LayerSet::all(2))).unwrap();
        assert_eq!(pv.values(), start.as_slice());

        let q = Quadratic::isotropic(p);
        let cfg = OptimizerConfig {
            drop_count: 2,
            steps: 1,
            ..OptimizerConfig::default()
        };
        let rec = ZoOptimizer::new(cfg)
            .lezo_step(&mut pv, &q, &Batch::unit(), 0)
            .unwrap();
        assert_eq!(rec.loss_plus, rec.loss_minus);
        assert_eq!(rec.projected_grad, 0.0);
        assert_eq!(pv.values(), start.as_slice());
    }

    #[test]
    fn equal_specs_give_bitwise_equal_results() {
        let p = build_partition(&[5, 5], 3).unwrap();
        let spec = PerturbationSpec::new(123, 0.1, LayerSet::from_indices(vec![1]));
        let mut a = ParameterVector::new(vec![0.7; 13], p.clone()).unwrap();
        let mut b = ParameterVector::new(vec![0.7; 13], p).unwrap();
        perturb_parameters(&mut a, &spec).unwrap();
        perturb_parameters(&mut b, &spec).unwrap();
        assert_eq!(a, b);
        assert!(a.values()[8..].iter().all(|&v| v == 0.7));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let p = build_partition(&[2], 0).unwrap();
        let mut pv = ParameterVector::<f64>::zeros(p);
        assert!(
            perturb_parameters(&mut pv, &PerturbationSpec::new(0, 0.0, LayerSet::empty())).is_err()
        );
        assert!(perturb_parameters(
            &mut pv,
            &PerturbationSpec::new(0, 1.0, LayerSet::from_indices(vec![1]))
        )
        .is_err());
        let other = make_quadratic(3, 1, 1.0, 0).unwrap();
        let spec = PerturbationSpec::new(0, 1.0, LayerSet::empty());
        assert!(spsa_projected_gradient(&mut pv, &other, &Batch::unit(), &spec).is_err());
    }

    #[test]
    fn non_finite_loss_restores_before_erroring() {
        let p = build_partition(&[2, 2], 0).unwrap();
        let start = vec![0.0, 0.1, -0.2, 0.3];
        // θ + μz pushes coordinate 0 past 0 for roughly half the seeds and
        // θ − μz for the other half; both failure points are exercised.
        let cliff = Cliff {
            partition: p.clone(),
            threshold: 0.0,
        };
        let mut hit_plus = false;
        let mut hit_minus = false;
        for seed in 0..16 {
            let mut pv = ParameterVector::new(start.clone(), p.clone()).unwrap();
            let spec = PerturbationSpec::new(seed, 0.5, LayerSet::empty());
            let z0 = GaussianStream::new(seed).next_normal();
            let err = spsa_projected_gradient(&mut pv, &cliff, &Batch::unit(), &spec).unwrap_err();
            assert!(matches!(err, Error::Numeric(_)));
            if z0 > 0.0 {
                hit_plus = true;
            } else {
                hit_minus = true;
            }
            for (a, b) in pv.values().iter().zip(&start) {
                assert!(close(*a, *b, 0.5), "seed {seed}: {a} vs {b}");
            }
        }
        assert!(hit_plus && hit_minus);

        let mut pv = ParameterVector::new(start.clone(), p).unwrap();
        let cfg = OptimizerConfig {
            steps: 1,
            ..OptimizerConfig::default()
        };
        let cliff_step = ZoOptimizer::new(cfg).mezo_step(&mut pv, &cliff, &Batch::unit(), 0);
        assert!(cliff_step.is_err());
        for (a, b) in pv.values().iter().zip(&start) {
            assert!(close(*a, *b, 1e-3));
        }
    }

    #[test]
    fn step_budget_is_enforced() {
        let q = make_quadratic(4, 2, 1.0, 0).unwrap();
        let mut pv =
            ParameterVector::<f64>::new(vec![1.0; 4], Objective::<f64>::partition(&q).clone())
                .unwrap();
        let mut opt = ZoOptimizer::new(OptimizerConfig {
            steps: 2,
            ..OptimizerConfig::default()
        });
        assert!(opt.lezo_step(&mut pv, &q, &Batch::unit(), 2).is_err());
        let mut opt = ZoOptimizer::new(OptimizerConfig {
            steps: 2,
            drop_count: 3,
            ..OptimizerConfig::default()
        });
        assert!(opt.lezo_step(&mut pv, &q, &Batch::unit(), 0).is_err());
    }

    #[test]
    fn aligned_direction_moves_along_gradient() {
        // L = ½‖θ‖², θ = (1, 0), z = (1, 0): Δθ = −η (zᵀ∇L) z = (−η, 0).
        let q = make_quadratic(2, 1, 1.0, 0).unwrap();
        let mut pv =
            ParameterVector::<f64>::new(vec![1.0, 0.0], Objective::<f64>::partition(&q).clone())
                .unwrap();
        let cfg = OptimizerConfig {
            learning_rate: 0.1,
            steps: 1,
            ..OptimizerConfig::default()
        };
        let mut opt = ZoOptimizer::with_source(cfg, FixedDirection::new(vec![1.0, 0.0]));
        opt.mezo_step(&mut pv, &q, &Batch::unit(), 0).unwrap();
        assert!((pv.values()[0] - 0.9).abs() < 1e-12);
        assert_eq!(pv.values()[1], 0.0);
    }

    #[test]
    fn update_pass_replays_perturbation_draws() {
        let q = make_quadratic(24, 4, 3.0, 1).unwrap();
        let mut pv = ParameterVector::<f64>::new(
            Objective::<f64>::init_params(&q, 2),
            Objective::<f64>::partition(&q).clone(),
        )
        .unwrap();
        let cfg = OptimizerConfig {
            drop_count: 2,
            steps: 5,
            ..OptimizerConfig::default()
        };
        let mut opt = ZoOptimizer::with_source(cfg, RecordingSource::new(GaussianStream::new(0)));
        for t in 0..5 {
            opt.source_mut().clear();
            let rec = opt.lezo_step(&mut pv, &q, &Batch::unit(), t).unwrap();
            let segs = opt.source().segments();
            assert_eq!(segs.len(), 4, "three perturbations and one update");
            assert!(segs
                .iter()
                .all(|(seed, _)| *seed == opt.perturbation_seed(t)));
            assert_eq!(
                segs[0].1.len(),
                Objective::<f64>::partition(&q).active_len(&rec.dropped)
            );
            for (_, draws) in &segs[1..] {
                assert_eq!(draws, &segs[0].1);
            }
        }
    }

    #[test]
    fn converges_on_small_quadratic() {
        let q = make_quadratic(2, 1, 1.0, 0).unwrap();
        let mut pv =
            ParameterVector::<f64>::new(vec![1.0, -1.0], Objective::<f64>::partition(&q).clone())
                .unwrap();
        let cfg = OptimizerConfig {
            learning_rate: 0.1,
            mu: 1e-3,
            steps: 2000,
            ..OptimizerConfig::default()
        };
        let mut opt = ZoOptimizer::new(cfg);
        for t in 0..2000 {
            opt.lezo_step(&mut pv, &q, &Batch::unit(), t).unwrap();
        }
        let loss: f64 = q.loss(pv.values(), &Batch::unit());
        assert!(loss < 1e-3, "loss {loss}");
    }

    #[test]
    fn dense_estimator_examples() {
        let q = make_quadratic(2, 1, 1.0, 0).unwrap();
        let mut pv =
            ParameterVector::<f64>::new(vec![1.0, 0.0], Objective::<f64>::partition(&q).clone())
                .unwrap();
        let g = estimate_gradient_dense(&mut pv, &q, &Batch::unit(), 1e-3, &[1.0, 0.0]).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-12 && g[1] == 0.0);
        let zero = estimate_gradient_dense(&mut pv, &q, &Batch::unit(), 1e-3, &[0.0, 0.0]).unwrap();
        assert_eq!(zero, vec![0.0, 0.0]);
        assert!(estimate_gradient_dense(&mut pv, &q, &Batch::unit(), 1e-3, &[1.0]).is_err());
    }

    #[test]
    fn sparse_estimator_support() {
        let p = build_partition(&[3, 3], 2).unwrap();
        let q = Quadratic::isotropic(p.clone());
        let theta: Vec<f64> = (0..8).map(|i| 1.0 + i as f64).collect();
        let mut pv = ParameterVector::new(theta, p.clone()).unwrap();
        let z: Vec<f64> = vec![0.3, -1.2, 0.8, 0.1, -0.4, 2.0, -0.6, 1.1];

        let dense = estimate_gradient_dense(&mut pv.clone(), &q, &Batch::unit(), 1e-3, &z).unwrap();
        let sparse = estimate_gradient_sparse(
            &mut pv.clone(),
            &q,
            &Batch::unit(),
            1e-3,
            &z,
            &LayerSet::empty(),
        )
        .unwrap();
        assert_eq!(dense, sparse);

        let only = estimate_gradient_sparse(
            &mut pv,
            &q,
            &Batch::unit(),
            1e-3,
            &z[..2],
            &LayerSet::all(2),
        )
        .unwrap();
        assert!(only[2..].iter().all(|&v| v == 0.0));
        assert!(only[..2].iter().any(|&v| v != 0.0));
        assert!(
            estimate_gradient_sparse(&mut pv, &q, &Batch::unit(), 1e-3, &z, &LayerSet::all(2))
                .is_err()
        );
    }

    proptest! {
        #[test]
        fn cycle_restores_and_spares_dropped_layers(
            sizes in proptest::collection::vec(1usize..40, 1..6),
            always in 0usize..10,
            seed in any::<u64>(),
            drop_mask in any::<u8>(),
            mu in 1e-5f64..1e-1,
            init_seed in any::<u64>(),
        ) {
            let p = build_partition(&sizes, always).unwrap();
            let dropped: LayerSet = (0..sizes.len()).filter(|i| drop_mask & (1 << i) != 0).collect();
            let q = Quadratic::isotropic(p.clone());
            let start: Vec<f64> = q.init_params(init_seed);
            let mut pv = ParameterVector::new(start.clone(), p.clone()).unwrap();
            let spec = PerturbationSpec::new(seed, mu, dropped.clone());
            spsa_projected_gradient(&mut pv, &q, &Batch::unit(), &spec).unwrap();
            for (i, (a, b)) in pv.values().iter().zip(&start).enumerate() {
                match p.owner(i).unwrap() {
                    crate::param::Owner::Layer(l) if dropped.contains(l) => {
                        prop_assert_eq!(a.to_bits(), b.to_bits());
                    }
                    _ => prop_assert!(close(*a, *b, mu), "{} vs {}", a, b),
                }
            }
        }
    }
}
