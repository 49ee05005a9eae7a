use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;
use zo_forge_core::{OptimizerConfig, ParameterVector, StepRecord, ZoOptimizer};

use crate::error::Result;
use crate::task::Task;

/// Below this parameter count phase timings are dominated by noise.
pub const RECOMMENDED_MIN_D: usize = 1_000_000;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Phases {
    pub forward: f64,
    pub perturb: f64,
    pub update: f64,
    pub other: f64,
}

impl Phases {
    pub fn sum(&self) -> f64 {
        self.forward + self.perturb + self.update + self.other
    }
}

/// Phase breakdown for one optimizer variant.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingReport {
    pub drop_count: usize,
    pub d: usize,
    pub steps_measured: usize,
    pub totals_ns: Phases,
    /// `totals_ns` normalized to sum to one.
    pub fractions: Phases,
    pub medians_ns: Phases,
    pub median_step_ns: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ratios {
    pub forward: f64,
    pub perturb: f64,
    pub update: f64,
    pub step: f64,
}

/// Dense (MeZO) versus sparse (LeZO) timing comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub dense: TimingReport,
    pub sparse: TimingReport,
    /// Sparse median over dense median, per phase.
    pub ratios: Ratios,
    pub timer_resolution_ns: u64,
    pub warnings: Vec<String>,
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Smallest non-zero difference between consecutive clock readings.
pub fn timer_resolution_ns() -> u64 {
    let mut best = u64::MAX;
    for _ in 0..1000 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min((b - a).as_nanos() as u64);
    }
    best
}

fn other_ns(r: &StepRecord) -> u64 {
    r.time_total_ns
        .saturating_sub(r.time_forward_ns + r.time_perturb_ns + r.time_update_ns)
}

pub fn summarize(records: &[StepRecord], drop_count: usize, d: usize) -> TimingReport {
    let column = |f: &dyn Fn(&StepRecord) -> u64| -> Vec<f64> {
        records.iter().map(|r| f(r) as f64).collect()
    };
    let forward = column(&|r| r.time_forward_ns);
    let perturb = column(&|r| r.time_perturb_ns);
    let update = column(&|r| r.time_update_ns);
    let other = column(&other_ns);
    let mut step = column(&|r| r.time_total_ns);
    let totals = Phases {
        forward: forward.iter().sum(),
        perturb: perturb.iter().sum(),
        update: update.iter().sum(),
        other: other.iter().sum(),
    };
    let all = totals.sum();
    let fractions = if all > 0.0 {
        Phases {
            forward: totals.forward / all,
            perturb: totals.perturb / all,
            update: totals.update / all,
            other: totals.other / all,
        }
    } else {
        Phases {
            other: 1.0,
            ..Phases::default()
        }
    };
    let med = |mut v: Vec<f64>| median(&mut v);
    TimingReport {
        drop_count,
        d,
        steps_measured: records.len(),
        totals_ns: totals,
        fractions,
        medians_ns: Phases {
            forward: med(forward),
            perturb: med(perturb),
            update: med(update),
            other: med(other),
        },
        median_step_ns: median(&mut step),
    }
}

/// Times `measure` steps of MeZO (`drop_count = 0`) and of LeZO with the
/// configured drop count after `warmup` unmeasured steps of each. Dense and
/// sparse steps alternate so slow drift affects both equally.
pub fn bench_timing(
    task: &Task,
    opt: &OptimizerConfig,
    warmup: usize,
    measure: usize,
) -> Result<BenchReport> {
    let partition = task.model.partition().clone();
    let d = partition.total_len();
    let init = task.init_params(opt.base_seed);
    let total = warmup + measure;
    let dense_cfg = OptimizerConfig {
        drop_count: 0,
        steps: total,
        ..opt.clone()
    };
    let sparse_cfg = OptimizerConfig {
        steps: total,
        ..opt.clone()
    };
    sparse_cfg.validate(partition.num_layers())?;
    let mut dense_pv = ParameterVector::new(init.clone(), partition.clone())?;
    let mut sparse_pv = ParameterVector::new(init, partition)?;
    let mut dense_opt = ZoOptimizer::new(dense_cfg);
    let mut sparse_opt = ZoOptimizer::new(sparse_cfg);
    let mut dense = Vec::with_capacity(measure);
    let mut sparse = Vec::with_capacity(measure);
    for t in 0..total {
        let batch = task.batch(opt.batch_size, opt.base_seed, t)?;
        let a = dense_opt.mezo_step(&mut dense_pv, task.model.as_ref(), &batch, t)?;
        let b = sparse_opt.lezo_step(&mut sparse_pv, task.model.as_ref(), &batch, t)?;
        if t >= warmup {
            dense.push(a);
            sparse.push(b);
        }
    }
    let dense = summarize(&dense, 0, d);
    let sparse = summarize(&sparse, opt.drop_count, d);
    let ratio = |s: f64, m: f64| if m > 0.0 { s / m } else { f64::NAN };
    let ratios = Ratios {
        forward: ratio(sparse.medians_ns.forward, dense.medians_ns.forward),
        perturb: ratio(sparse.medians_ns.perturb, dense.medians_ns.perturb),
        update: ratio(sparse.medians_ns.update, dense.medians_ns.update),
        step: ratio(sparse.median_step_ns, dense.median_step_ns),
    };

    let resolution = timer_resolution_ns();
    let mut warnings = Vec::new();
    if d < RECOMMENDED_MIN_D {
        warnings.push(format!(
            "model has d = {d} < {RECOMMENDED_MIN_D} parameters; phase timings may be noisy"
        ));
    }
    for (name, report) in [("dense", &dense), ("sparse", &sparse)] {
        let m = report.medians_ns;
        for (phase, v) in [
            ("forward", m.forward),
            ("perturb", m.perturb),
            ("update", m.update),
        ] {
            if v < 100.0 * resolution as f64 {
                warnings.push(format!(
                    "{name} {phase} median {v} ns is within 100x of the timer resolution ({resolution} ns)"
                ));
            }
        }
    }
    Ok(BenchReport {
        dense,
        sparse,
        ratios,
        timer_resolution_ns: resolution,
        warnings,
    })
}

pub fn render_table(r: &BenchReport) -> String {
    let ms = |ns: f64| ns / 1e6;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "d = {}, {} measured steps per variant",
        r.dense.d, r.dense.steps_measured
    );
    let _ = writeln!(
        out,
        "{:<10} {:>14} {:>14} {:>10}",
        "phase", "dense ms", "sparse ms", "ratio"
    );
    let rows = [
        (
            "forward",
            r.dense.medians_ns.forward,
            r.sparse.medians_ns.forward,
            r.ratios.forward,
        ),
        (
            "perturb",
            r.dense.medians_ns.perturb,
            r.sparse.medians_ns.perturb,
            r.ratios.perturb,
        ),
        (
            "update",
            r.dense.medians_ns.update,
            r.sparse.medians_ns.update,
            r.ratios.update,
        ),
        (
            "step",
            r.dense.median_step_ns,
            r.sparse.median_step_ns,
            r.ratios.step,
        ),
    ];
    for (name, a, b, q) in rows {
        let _ = writeln!(out, "{name:<10} {:>14.3} {:>14.3} {q:>10.3}", ms(a), ms(b));
    }
    let _ = writeln!(out, "time fractions (forward / perturb / update / other):");
    for (name, f) in [("dense", r.dense.fractions), ("sparse", r.sparse.fractions)] {
        let _ = writeln!(
            out,
            "  {name:<8} {:.3} / {:.3} / {:.3} / {:.3}",
            f.forward, f.perturb, f.update, f.other
        );
    }
    for w in &r.warnings {
        let _ = writeln!(out, "warning: {w}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use zo_forge_core::LayerSet;

    fn record(f: u64, p: u64, u: u64, total: u64) -> StepRecord {
        StepRecord {
            step: 0,
            loss_plus: 0.0,
            loss_minus: 0.0,
            projected_grad: 0.0,
            dropped: LayerSet::empty(),
            time_forward_ns: f,
            time_perturb_ns: p,
            time_update_ns: u,
            time_total_ns: total,
            alloc_delta_bytes: None,
        }
    }

    #[test]
    fn fractions_sum_to_one() {
        let recs = vec![
            record(10, 5, 3, 20),
            record(12, 4, 3, 21),
            record(11, 6, 2, 25),
        ];
        let r = summarize(&recs, 0, 100);
        assert!((r.fractions.sum() - 1.0).abs() < 1e-9);
        assert_eq!(r.medians_ns.forward, 11.0);
        assert_eq!(r.totals_ns.other, 2.0 + 2.0 + 6.0);
        assert_eq!(r.median_step_ns, 21.0);
    }

    #[test]
    fn empty_totals_still_normalized() {
        let r = summarize(&[record(0, 0, 0, 0)], 0, 1);
        assert!((r.fractions.sum() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&mut []).is_nan());
    }
}
