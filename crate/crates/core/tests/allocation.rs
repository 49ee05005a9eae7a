use zo_forge_core::alloc::{self, AllocationObserver, CountingAlloc};
use zo_forge_core::models::{make_quadratic, Batch, Objective};
use zo_forge_core::{OptimizerConfig, ParameterVector, ZoOptimizer};

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

fn step_deltas(d: usize, drop_count: usize) -> Vec<usize> {
    let q = make_quadratic(d, 8, 4.0, 3).unwrap();
    let mut pv = ParameterVector::new(
        Objective::<f64>::init_params(&q, 1),
        Objective::<f64>::partition(&q).clone(),
    )
    .unwrap();
    let mut opt = ZoOptimizer::new(OptimizerConfig {
        learning_rate: 1e-6,
        mu: 1e-3,
        steps: 5,
        drop_count,
        batch_size: 1,
        base_seed: 9,
    });
    let batch = Batch::unit();
    (0..5)
        .map(|t| {
            opt.lezo_step(&mut pv, &q, &batch, t)
                .unwrap()
                .alloc_delta_bytes
                .expect("counting allocator is installed")
        })
        .collect()
}

#[test]
fn step_overhead_is_small_and_independent_of_size() {
    assert!(alloc::observer().is_active());
    for drop_count in [0, 4] {
        let mut per_d = Vec::new();
        for d in [1_000, 10_000, 100_000, 1_000_000] {
            let deltas = step_deltas(d, drop_count);
            assert!(
                deltas.iter().all(|&b| b <= 4096),
                "d={d} n={drop_count}: {deltas:?}"
            );
            per_d.push(*deltas.iter().max().unwrap());
        }
        assert!(
            per_d.windows(2).all(|w| w[0] == w[1]),
            "n={drop_count}: {per_d:?}"
        );
    }
}

#[test]
fn a_parameter_copy_would_be_visible() {
    let obs = alloc::observer();
    let before = obs.current_bytes();
    obs.reset_peak();
    let copy = vec![0.0f64; 1_000_000];
    assert!(obs.peak_bytes() - before >= 8_000_000);
    drop(copy);
}
