use serde::Serialize;

use crate::timing::median;
use crate::train::StepRow;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpeedupReport {
    /// Median dense step time over median sparse step time.
    pub compute_speedup: Option<f64>,
    /// Dense steps-to-target over sparse steps-to-target.
    pub convergence_speedup: Option<f64>,
    /// Product of the two.
    pub wall_clock_speedup: Option<f64>,
    pub dense_steps_to_target: Option<usize>,
    pub sparse_steps_to_target: Option<usize>,
    pub dense_median_step_ns: f64,
    pub sparse_median_step_ns: f64,
    pub target: f64,
}

/// Steps (1-based) until the eval metric first reaches `target`.
pub fn steps_to_target(rows: &[StepRow], target: f64, higher_is_better: bool) -> Option<usize> {
    rows.iter().find_map(|r| {
        let m = r.eval_metric?;
        let hit = if higher_is_better {
            m >= target
        } else {
            m <= target
        };
        hit.then_some(r.step + 1)
    })
}

fn median_step_ns(rows: &[StepRow]) -> f64 {
    let mut v: Vec<f64> = rows
        .iter()
        .map(|r| (r.time_forward_ns + r.time_perturb_ns + r.time_update_ns) as f64)
        .collect();
    median(&mut v)
}

/// Compares a dense and a sparse training run. Quantities that depend on a
/// target one of the runs never reached are `None`.
pub fn report_speedup(
    dense: &[StepRow],
    sparse: &[StepRow],
    target: f64,
    higher_is_better: bool,
) -> SpeedupReport {
    let dense_ns = median_step_ns(dense);
    let sparse_ns = median_step_ns(sparse);
    let compute = (sparse_ns > 0.0 && dense_ns.is_finite()).then(|| dense_ns / sparse_ns);
    let dense_steps = steps_to_target(dense, target, higher_is_better);
    let sparse_steps = steps_to_target(sparse, target, higher_is_better);
    let convergence = match (dense_steps, sparse_steps) {
        (Some(a), Some(b)) => Some(a as f64 / b as f64),
        _ => None,
    };
    SpeedupReport {
        compute_speedup: compute,
        convergence_speedup: convergence,
        wall_clock_speedup: compute.zip(convergence).map(|(c, v)| c * v),
        dense_steps_to_target: dense_steps,
        sparse_steps_to_target: sparse_steps,
        dense_median_step_ns: dense_ns,
        sparse_median_step_ns: sparse_ns,
        target,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(metrics: &[f64], ns: u64) -> Vec<StepRow> {
        metrics
            .iter()
            .enumerate()
            .map(|(i, &m)| StepRow {
                step: i,
                loss_plus: 0.0,
                loss_minus: 0.0,
                projected_grad: 0.0,
                eval_metric: Some(m),
                time_forward_ns: ns,
                time_perturb_ns: ns,
                time_update_ns: ns,
                alloc_delta_bytes: None,
            })
            .collect()
    }

    #[test]
    fn self_comparison_is_unity() {
        let r = rows(&[0.5, 0.8, 0.95], 100);
        let rep = report_speedup(&r, &r, 0.9, true);
        assert_eq!(rep.compute_speedup, Some(1.0));
        assert_eq!(rep.convergence_speedup, Some(1.0));
    }

    #[test]
    fn unreached_target_is_null() {
        let r = rows(&[0.5, 0.6], 100);
        let rep = report_speedup(&r, &r, 0.99, true);
        assert_eq!(rep.convergence_speedup, None);
        assert_eq!(rep.wall_clock_speedup, None);
        let json = serde_json::to_value(&rep).unwrap();
        assert!(json["convergence_speedup"].is_null());
    }

    #[test]
    fn faster_sparse_run() {
        let dense = rows(&[3.0, 2.0, 1.0, 0.5], 300);
        let sparse = rows(&[3.0, 0.9, 0.4, 0.2], 100);
        let rep = report_speedup(&dense, &sparse, 1.0, false);
        assert_eq!(rep.compute_speedup, Some(3.0));
        assert_eq!(rep.dense_steps_to_target, Some(3));
        assert_eq!(rep.sparse_steps_to_target, Some(2));
        assert_eq!(rep.wall_clock_speedup, Some(4.5));
    }
}
