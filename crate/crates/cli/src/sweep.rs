use serde::Serialize;
use zo_forge_core::oracle::{convergence_scaling_sweep, spearman, ConvergenceTrial};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::grid::thread_pool;
use crate::train::{output_dir, write_json};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepSummary {
    /// Spearman correlation of mean steps-to-threshold with ρd over all
    /// converged cells.
    pub spearman: Option<f64>,
    /// `(d, keep_fraction, active_dim, mean_steps)` per cell.
    pub cells: Vec<(usize, f64, usize, Option<f64>)>,
}

pub fn summarize(trials: &[ConvergenceTrial]) -> SweepSummary {
    let cells: Vec<_> = trials
        .iter()
        .map(|t| (t.d, t.keep_fraction(), t.active_dim, t.mean_steps()))
        .collect();
    let (xs, ys): (Vec<f64>, Vec<f64>) = cells
        .iter()
        .filter_map(|c| c.3.map(|m| (c.2 as f64, m)))
        .unzip();
    SweepSummary {
        spearman: (xs.len() >= 2).then(|| spearman(&xs, &ys)),
        cells,
    }
}

/// `sweep-convergence` subcommand: `sweep.csv` with one row per repeat and
/// `sweep_summary.json`.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    jobs: Option<usize>,
) -> Result<(Vec<ConvergenceTrial>, SweepSummary)> {
    let dir = output_dir(cfg)?;
    let sweep = cfg.sweep_config()?;
    let trials = thread_pool(jobs)?.install(|| convergence_scaling_sweep(&sweep))?;
    let mut w = csv::Writer::from_path(dir.join("sweep.csv"))?;
    w.write_record([
        "d",
        "keep_fraction",
        "active_dim",
        "lr",
        "repeat",
        "steps_to_threshold",
    ])?;
    for t in &trials {
        for (r, steps) in t.steps_to_threshold.iter().enumerate() {
            w.write_record([
                t.d.to_string(),
                t.keep_fraction().to_string(),
                t.active_dim.to_string(),
                t.lr.to_string(),
                r.to_string(),
                steps.map(|s| s.to_string()).unwrap_or_default(),
            ])?;
        }
    }
    w.flush().map_err(|e| CliError::io(&dir, e))?;
    let summary = summarize(&trials);
    write_json(
        &dir.join("sweep_summary.json"),
        &serde_json::json!({ "seed": cfg.seed, "summary": &summary, "config": cfg }),
    )?;
    Ok((trials, summary))
}
