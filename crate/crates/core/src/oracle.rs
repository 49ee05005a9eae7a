//! Independent verifiers for the engine.
//!
//! Nothing here touches the in-place seed-replay path: directions are
//! materialized as full vectors and the estimator algebra is written out
//! explicitly, so agreement with [`crate::engine`] is a real cross-check.

use rayon::prelude::*;

use crate::engine::{
    estimate_gradient_sparse, select_dropped_layers, OptimizerConfig, ZoOptimizer,
};
use crate::error::{Error, Result};
use crate::models::{Batch, Differentiable, Objective, Quadratic};
use crate::param::{LayerPartition, LayerSet, ParameterVector};
use crate::rng::{derive_seed, mix64, GaussianStream, NormalSource, SeedPurpose};

/// Parameter snapshots `θ_0, θ_1, …, θ_T`.
pub type Trajectory = Vec<Vec<f64>>;

/// Materializes the step direction `z′`: standard normals on the active
/// coordinates in canonical order, zeros on dropped layers.
pub fn materialize_direction(
    partition: &LayerPartition,
    dropped: &LayerSet,
    seed: u64,
) -> Vec<f64> {
    let mut z = vec![0.0; partition.total_len()];
    let mut stream = GaussianStream::new(seed);
    let mut order: Vec<(usize, usize)> = partition
        .always_active()
        .iter()
        .map(|s| (s.offset, s.len))
        .collect();
    for (layer, s) in partition.layers().iter().enumerate() {
        if !dropped.contains(layer) {
            order.push((s.offset, s.len));
        }
    }
    for (offset, len) in order {
        for zi in &mut z[offset..offset + len] {
            *zi = stream.next_normal();
        }
    }
    z
}

/// Replays LeZO-SGD (ZO-SGD when `drop_count == 0`) with explicit vectors:
/// `θ ± μz′` are formed out of place and `θ ← θ − η·g·z′` is applied
/// directly. Uses the same seed schedule as [`ZoOptimizer`].
pub fn explicit_z_replay<L, F>(
    cfg: &OptimizerConfig,
    loss: &L,
    theta0: &[f64],
    mut batch_for: F,
    steps: usize,
) -> Result<Trajectory>
where
    L: Objective<f64> + ?Sized,
    F: FnMut(usize) -> Result<Batch>,
{
    let partition = loss.partition();
    if theta0.len() != partition.total_len() {
        return Err(Error::Size(
            "initial parameters do not match the objective".into(),
        ));
    }
    cfg.validate(partition.num_layers())?;
    let mut theta = theta0.to_vec();
    let mut trajectory = vec![theta.clone()];
    for t in 0..steps {
        let batch = batch_for(t)?;
        let dropped = select_dropped_layers(
            partition.num_layers(),
            cfg.drop_count,
            derive_seed(cfg.base_seed, SeedPurpose::LayerSelect, t as u64),
        )?;
        let z = materialize_direction(
            partition,
            &dropped,
            derive_seed(cfg.base_seed, SeedPurpose::Perturbation, t as u64),
        );
        let plus: Vec<f64> = theta
            .iter()
            .zip(&z)
            .map(|(x, zi)| x + cfg.mu * zi)
            .collect();
        let minus: Vec<f64> = theta
            .iter()
            .zip(&z)
            .map(|(x, zi)| x - cfg.mu * zi)
            .collect();
        let loss_plus = loss.loss(&plus, &batch);
        let loss_minus = loss.loss(&minus, &batch);
        if !(loss_plus.is_finite() && loss_minus.is_finite()) {
            return Err(Error::Numeric(format!("non-finite loss at step {t}")));
        }
        let projected_grad = (loss_plus - loss_minus) / (2.0 * cfg.mu);
        let coeff = cfg.learning_rate * projected_grad;
        for (x, zi) in theta.iter_mut().zip(&z) {
            *x -= coeff * zi;
        }
        trajectory.push(theta.clone());
    }
    Ok(trajectory)
}

/// Runs the engine for `steps` steps and records every iterate.
pub fn engine_trajectory<L, F>(
    cfg: &OptimizerConfig,
    loss: &L,
    theta0: &[f64],
    mut batch_for: F,
    steps: usize,
    sparse: bool,
) -> Result<Trajectory>
where
    L: Objective<f64> + ?Sized,
    F: FnMut(usize) -> Result<Batch>,
{
    let mut pv = ParameterVector::new(theta0.to_vec(), loss.partition().clone())?;
    let mut opt = ZoOptimizer::new(OptimizerConfig {
        steps: steps.max(cfg.steps),
        ..cfg.clone()
    });
    let mut trajectory = vec![pv.snapshot()];
    for t in 0..steps {
        let batch = batch_for(t)?;
        if sparse {
            opt.lezo_step(&mut pv, loss, &batch, t)?;
        } else {
            opt.mezo_step(&mut pv, loss, &batch, t)?;
        }
        trajectory.push(pv.snapshot());
    }
    Ok(trajectory)
}

/// Largest per-element relative difference between two trajectories, with
/// `floor` guarding elements near zero: `|a − b| / max(|b|, floor)`.
pub fn max_relative_deviation(a: &Trajectory, b: &Trajectory, floor: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "trajectories differ in length");
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y))
        .map(|(x, y)| (x - y).abs() / y.abs().max(floor))
        .fold(0.0, f64::max)
}

/// Central differences with per-coordinate step `h·(1 + |θ_i|)`.
pub fn finite_difference_gradient<L: Objective<f64> + ?Sized>(
    loss: &L,
    theta: &[f64],
    batch: &Batch,
    h: f64,
) -> Result<Vec<f64>> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Argument(format!("step size must be > 0, got {h}")));
    }
    let mut probe = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let step = h * (1.0 + theta[i].abs());
        probe[i] = theta[i] + step;
        let up = loss.loss(&probe, batch);
        probe[i] = theta[i] - step;
        let down = loss.loss(&probe, batch);
        probe[i] = theta[i];
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite loss probing coordinate {i}"
            )));
        }
        grad.push((up - down) / (2.0 * step));
    }
    Ok(grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub probes: usize,
    pub passed: bool,
}

/// Compares analytic and finite-difference gradients at each probe point.
/// The error of one probe is `‖g − g_fd‖₂ / max(‖g_fd‖₂, ‖g‖₂, 1e-12)`.
pub fn grad_check<L: Differentiable<f64> + ?Sized>(
    loss: &L,
    probes: &[(Vec<f64>, Batch)],
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let mut max_rel_error: f64 = 0.0;
    for (theta, batch) in probes {
        let analytic = loss.gradient(theta, batch);
        let numeric = finite_difference_gradient(loss, theta, batch, h)?;
        let diff = norm(
            &analytic
                .iter()
                .zip(&numeric)
                .map(|(a, b)| a - b)
                .collect::<Vec<_>>(),
        );
        let scale = norm(&numeric).max(norm(&analytic)).max(1e-12);
        max_rel_error = max_rel_error.max(diff / scale);
    }
    Ok(GradCheckReport {
        max_rel_error,
        probes: probes.len(),
        passed: max_rel_error <= tolerance,
    })
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnbiasednessResult {
    pub empirical_mean: Vec<f64>,
    /// The sparse true gradient `R(∇L(θ))`.
    pub target: Vec<f64>,
    pub rel_error: f64,
}

/// Averages `k` sparse SPSA estimates on a quadratic and compares the mean
/// with the true gradient restricted to the active coordinates.
pub fn unbiasedness_test(
    loss: &Quadratic,
    theta: &[f64],
    dropped: &LayerSet,
    k: usize,
    mu: f64,
    seed: u64,
) -> Result<UnbiasednessResult> {
    let partition = Objective::<f64>::partition(loss);
    partition.check_dropped(dropped)?;
    if k == 0 {
        return Err(Error::Argument("need at least one sample".into()));
    }
    let mut target = loss.gradient_at(theta);
    for (layer, s) in partition.layers().iter().enumerate() {
        if dropped.contains(layer) {
            target[s.range()].iter_mut().for_each(|g| *g = 0.0);
        }
    }
    let target_norm = norm(&target);
    if target_norm == 0.0 {
        return Err(Error::Argument(
            "sparse gradient is zero at θ; pick a point away from the optimum".into(),
        ));
    }

    let active = partition.active_len(dropped);
    let mut pv = ParameterVector::new(theta.to_vec(), partition.clone())?;
    let mut stream = GaussianStream::new(seed);
    let mut z_active = vec![0.0; active];
    let mut sum = vec![0.0; theta.len()];
    let batch = Batch::unit();
    for _ in 0..k {
        z_active.iter_mut().for_each(|z| *z = stream.next_normal());
        let est = estimate_gradient_sparse(&mut pv, loss, &batch, mu, &z_active, dropped)?;
        for (s, e) in sum.iter_mut().zip(&est) {
            *s += e;
        }
    }
    let empirical_mean: Vec<f64> = sum.iter().map(|s| s / k as f64).collect();
    let err: Vec<f64> = empirical_mean
        .iter()
        .zip(&target)
        .map(|(a, b)| a - b)
        .collect();
    Ok(UnbiasednessResult {
        rel_error: norm(&err) / target_norm,
        empirical_mean,
        target,
    })
}

/// Root-mean-square of `unbiasedness_test` errors over `repeats` seeds.
pub fn rms_unbiasedness_error(
    loss: &Quadratic,
    theta: &[f64],
    dropped: &LayerSet,
    k: usize,
    mu: f64,
    seed: u64,
    repeats: usize,
) -> Result<f64> {
    let errors: Vec<f64> = (0..repeats as u64)
        .into_par_iter()
        .map(|r| {
            unbiasedness_test(loss, theta, dropped, k, mu, mix64(seed ^ mix64(r)))
                .map(|res| res.rel_error)
        })
        .collect::<Result<_>>()?;
    Ok((errors.iter().map(|e| e * e).sum::<f64>() / repeats as f64).sqrt())
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

/// Plain first-order gradient descent with a constant learning rate.
pub fn fo_sgd_baseline<L, F>(
    loss: &L,
    theta0: &[f64],
    learning_rate: f64,
    mut batch_for: F,
    steps: usize,
) -> Result<Trajectory>
where
    L: Differentiable<f64> + ?Sized,
    F: FnMut(usize) -> Result<Batch>,
{
    let mut theta = theta0.to_vec();
    let mut trajectory = vec![theta.clone()];
    for t in 0..steps {
        let batch = batch_for(t)?;
        let grad = loss.gradient(&theta, &batch);
        for (x, g) in theta.iter_mut().zip(&grad) {
            *x -= learning_rate * g;
        }
        if theta.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("iterate diverged at step {t}")));
        }
        trajectory.push(theta.clone());
    }
    Ok(trajectory)
}

/// Settings for [`convergence_scaling_sweep`].
#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub d_list: Vec<usize>,
    pub keep_fractions: Vec<f64>,
    /// Target σ² on the true squared gradient norm.
    pub threshold: f64,
    pub repeats: usize,
    pub seed: u64,
    /// Layers per quadratic; keep fractions must be multiples of `1/layers`.
    pub layers: usize,
    pub condition_number: f64,
    pub mu: f64,
    pub max_steps: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            d_list: vec![128, 512],
            keep_fractions: vec![0.25, 1.0],
            threshold: 1e-2,
            repeats: 10,
            seed: 0,
            layers: 8,
            condition_number: 1.0,
            mu: 1e-3,
            max_steps: 1_000_000,
        }
    }
}

/// Steps-to-threshold for one `(d, keep_fraction)` cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceTrial {
    pub d: usize,
    /// Active coordinates per step (ρd).
    pub active_dim: usize,
    pub threshold: f64,
    /// Per repeat; `None` when the step budget ran out.
    pub steps_to_threshold: Vec<Option<usize>>,
    pub lr: f64,
    pub mu: f64,
}

impl ConvergenceTrial {
    pub fn converged(&self) -> bool {
        self.steps_to_threshold.iter().all(Option::is_some)
    }

    /// Mean over repeats, `None` if any repeat failed to converge.
    pub fn mean_steps(&self) -> Option<f64> {
        let total: Option<usize> = self.steps_to_threshold.iter().copied().sum();
        total.map(|t| t as f64 / self.steps_to_threshold.len() as f64)
    }

    pub fn keep_fraction(&self) -> f64 {
        self.active_dim as f64 / self.d as f64
    }
}

/// Runs LeZO on quadratics for every `(d, keep_fraction)` pair until the
/// true squared gradient norm falls below the threshold. The learning rate
/// is `1 / (4 (ρd + 4) L)` with `L` the largest Hessian eigenvalue.
pub fn convergence_scaling_sweep(cfg: &SweepConfig) -> Result<Vec<ConvergenceTrial>> {
    if cfg.repeats == 0 || cfg.layers == 0 {
        return Err(Error::Argument("repeats and layers must be ≥ 1".into()));
    }
    let mut cells = Vec::new();
    for &d in &cfg.d_list {
        if d % cfg.layers != 0 {
            return Err(Error::Argument(format!(
                "d = {d} is not a multiple of {} layers",
                cfg.layers
            )));
        }
        for &keep in &cfg.keep_fractions {
            let kept = keep * cfg.layers as f64;
            if (kept - kept.round()).abs() > 1e-9 || kept.round() < 1.0 || keep > 1.0 {
                return Err(Error::Argument(format!(
                    "keep fraction {keep} is not a positive multiple of 1/{}",
                    cfg.layers
                )));
            }
            cells.push((d, cfg.layers - kept.round() as usize));
        }
    }

    let runs: Vec<(usize, usize, usize)> = cells
        .iter()
        .flat_map(|&(d, drop)| (0..cfg.repeats).map(move |r| (d, drop, r)))
        .collect();
    let outcomes: Vec<Option<usize>> = runs
        .par_iter()
        .map(|&(d, drop, r)| steps_to_threshold(cfg, d, drop, r))
        .collect::<Result<_>>()?;

    Ok(cells
        .iter()
        .enumerate()
        .map(|(c, &(d, drop))| {
            let active_dim = d / cfg.layers * (cfg.layers - drop);
            ConvergenceTrial {
                d,
                active_dim,
                threshold: cfg.threshold,
                steps_to_threshold: outcomes[c * cfg.repeats..(c + 1) * cfg.repeats].to_vec(),
                lr: sweep_learning_rate(active_dim, cfg.condition_number),
                mu: cfg.mu,
            }
        })
        .collect())
}

pub fn sweep_learning_rate(active_dim: usize, smoothness: f64) -> f64 {
    1.0 / (4.0 * (active_dim as f64 + 4.0) * smoothness)
}

fn steps_to_threshold(
    cfg: &SweepConfig,
    d: usize,
    drop: usize,
    repeat: usize,
) -> Result<Option<usize>> {
    let cell_seed = mix64(cfg.seed ^ mix64(d as u64 ^ mix64(drop as u64 ^ mix64(repeat as u64))));
    let quad = crate::models::make_quadratic(d, cfg.layers, cfg.condition_number, cell_seed)?;
    let lr = sweep_learning_rate(d / cfg.layers * (cfg.layers - drop), quad.smoothness());

    // Start from a random point with unit gradient norm.
    let mut theta: Vec<f64> = Objective::<f64>::init_params(&quad, cell_seed);
    let g0 = norm(&quad.gradient_at(&theta));
    theta.iter_mut().for_each(|x| *x /= g0);

    let grad_sq = |theta: &[f64]| -> f64 {
        theta
            .iter()
            .zip(quad.eigenvalues())
            .map(|(x, l)| (l * x) * (l * x))
            .sum()
    };
    if grad_sq(&theta) < cfg.threshold {
        return Ok(Some(0));
    }
    let mut pv = ParameterVector::new(theta, Objective::<f64>::partition(&quad).clone())?;
    let mut opt = ZoOptimizer::new(OptimizerConfig {
        learning_rate: lr,
        mu: cfg.mu,
        steps: cfg.max_steps,
        drop_count: drop,
        batch_size: 1,
        base_seed: cell_seed,
    });
    let batch = Batch::unit();
    for t in 0..cfg.max_steps {
        opt.lezo_step(&mut pv, &quad, &batch, t)?;
        if grad_sq(pv.values()) < cfg.threshold {
            return Ok(Some(t + 1));
        }
    }
    Ok(None)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut out = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                out[k] = avg;
            }
            i = j + 1;
        }
        out
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    cov / (vx * vy).sqrt()
}
