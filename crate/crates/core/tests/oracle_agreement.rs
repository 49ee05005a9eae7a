use zo_forge_core::models::{
    load_dataset, make_logistic, make_mlp, make_quadratic, make_tiny_transformer, sample_batch,
    Batch, DatasetSpec, Labels, Objective,
};
use zo_forge_core::oracle::{
    engine_trajectory, explicit_z_replay, fo_sgd_baseline, grad_check, max_relative_deviation,
};
use zo_forge_core::{GaussianStream, NormalSource, OptimizerConfig};

fn cfg(drop_count: usize, lr: f64) -> OptimizerConfig {
    OptimizerConfig {
        learning_rate: lr,
        mu: 1e-3,
        steps: 20,
        drop_count,
        batch_size: 8,
        base_seed: 11,
    }
}

fn check_agreement<L: Objective<f64>>(model: &L, batches: &dyn Fn(usize) -> Batch, lr: f64) {
    let theta0 = model.init_params(5);
    let n_layers = model.num_layers();
    let mut drops = vec![0, 1, n_layers - 1];
    drops.dedup();
    for n in drops {
        let c = cfg(n, lr);
        let oracle = explicit_z_replay(&c, model, &theta0, |t| Ok(batches(t)), 20).unwrap();
        let engine = engine_trajectory(&c, model, &theta0, |t| Ok(batches(t)), 20, true).unwrap();
        let dev = max_relative_deviation(&engine, &oracle, 1e-3);
        assert!(dev <= 1e-10, "{} n={n}: {dev:e}", model.name());
    }
}

#[test]
fn engine_matches_explicit_oracle() {
    let q = make_quadratic(64, 4, 10.0, 1).unwrap();
    check_agreement(&q, &|_| Batch::unit(), 5e-4);

    let (train, _) = load_dataset(&DatasetSpec::blobs(6, 4, 200, 3)).unwrap();
    let batches = |t: usize| sample_batch(&train, 8, 3, t as u64).unwrap();
    check_agreement(&make_logistic(6, 4, 4, 2).unwrap(), &batches, 0.05);
    check_agreement(&make_mlp(6, 8, 4, 2).unwrap(), &batches, 0.05);
}

#[test]
fn dense_engine_matches_oracle_without_dropping() {
    let (train, _) = load_dataset(&DatasetSpec::blobs(5, 3, 120, 9)).unwrap();
    let model = make_logistic(5, 3, 3, 0).unwrap();
    let theta0 = model.init_params(1);
    let c = cfg(0, 0.1);
    let batches = |t: usize| sample_batch(&train, 8, 9, t as u64);
    let oracle = explicit_z_replay(&c, &model, &theta0, batches, 20).unwrap();
    let engine = engine_trajectory(&c, &model, &theta0, batches, 20, false).unwrap();
    assert!(max_relative_deviation(&engine, &oracle, 1e-3) <= 1e-10);
}

fn probes(
    cols: usize,
    rows: usize,
    theta_fn: &dyn Fn(u64) -> Vec<f64>,
    tokens: Option<usize>,
) -> Vec<(Vec<f64>, Batch)> {
    (0..5u64)
        .map(|p| {
            let mut s = GaussianStream::new(100 + p);
            let inputs: Vec<f64> = (0..rows * cols)
                .map(|_| match tokens {
                    Some(v) => s.next_below(v as u64) as f64,
                    None => s.next_normal(),
                })
                .collect();
            let labels = (0..rows).map(|r| (r + p as usize) % 3).collect();
            (
                theta_fn(p),
                Batch::new(inputs, cols, Labels::Classes(labels)).unwrap(),
            )
        })
        .collect()
}

fn perturbed(init: Vec<f64>, seed: u64, scale: f64) -> Vec<f64> {
    let mut s = GaussianStream::new(seed);
    init.into_iter()
        .map(|x| x + scale * s.next_normal())
        .collect()
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let logistic = make_logistic(4, 3, 3, 0).unwrap();
    let pts = probes(4, 6, &|p| perturbed(logistic.init_params(p), p, 0.5), None);
    let report = grad_check(&logistic, &pts, 1e-5, 1e-6).unwrap();
    assert!(report.passed, "logistic {:e}", report.max_rel_error);

    let mlp = make_mlp(4, 5, 3, 0).unwrap();
    let pts = probes(4, 6, &|p| perturbed(mlp.init_params(p), p, 0.3), None);
    let report = grad_check(&mlp, &pts, 1e-5, 1e-5).unwrap();
    assert!(report.passed, "mlp {:e}", report.max_rel_error);

    let tf = make_tiny_transformer(7, 4, 6, 2, 3, 0).unwrap();
    let pts = probes(4, 3, &|p| perturbed(tf.init_params(p), p, 0.1), Some(7));
    let report = grad_check(&tf, &pts, 1e-5, 1e-4).unwrap();
    assert_eq!(report.probes, 5);
    assert!(report.passed, "transformer {:e}", report.max_rel_error);
}

#[test]
fn first_order_baseline_learns_blobs() {
    let (train, eval) = load_dataset(&DatasetSpec::blobs(8, 2, 600, 4)).unwrap();
    let model = make_logistic(8, 2, 2, 0).unwrap();
    let traj = fo_sgd_baseline(
        &model,
        &model.init_params(0),
        0.5,
        |t| sample_batch(&train, 32, 4, t as u64),
        2000,
    )
    .unwrap();
    let acc = model
        .accuracy(traj.last().unwrap(), &eval.full_batch().unwrap())
        .unwrap();
    assert!(acc >= 0.99, "accuracy {acc}");
}
