use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;
use zo_forge_core::Error as CoreError;

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::task::Task;
use crate::train::{output_dir, train, write_json, write_steps_csv};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridCell {
    pub learning_rate: f64,
    pub mu: f64,
    /// Held-out loss after the last step; NaN when the run diverged.
    pub eval_loss: f64,
    pub eval_metric: Option<f64>,
    pub diverged: bool,
    pub steps_completed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridResult {
    /// Sorted by learning rate, then mu.
    pub cells: Vec<GridCell>,
    pub best: Option<GridCell>,
}

/// Lowest finite eval loss; ties go to the lower learning rate, then the
/// lower mu. `None` when every cell diverged.
pub fn select_best(cells: &[GridCell]) -> Option<&GridCell> {
    cells
        .iter()
        .filter(|c| !c.diverged && c.eval_loss.is_finite())
        .min_by(|a, b| {
            a.eval_loss
                .total_cmp(&b.eval_loss)
                .then(a.learning_rate.total_cmp(&b.learning_rate))
                .then(a.mu.total_cmp(&b.mu))
        })
}

pub fn thread_pool(jobs: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        builder = builder.num_threads(j.max(1));
    }
    builder
        .build()
        .map_err(|e| CliError::Config(format!("`--jobs`: {e}")))
}

/// Trains every `(learning_rate, mu)` combination of `cfg.grid` in
/// parallel. When `shard_dir` is set each cell's step CSV is written there.
pub fn grid_search(
    cfg: &ExperimentConfig,
    jobs: Option<usize>,
    shard_dir: Option<&Path>,
) -> Result<GridResult> {
    let grid = cfg
        .grid
        .as_ref()
        .ok_or_else(|| CliError::Config("`grid` section is required".into()))?;
    if grid.learning_rates.is_empty() || grid.mus.is_empty() {
        return Err(CoreError::Argument(
            "grid search needs at least one learning rate and one mu".into(),
        )
        .into());
    }
    let mut lrs = grid.learning_rates.clone();
    let mut mus = grid.mus.clone();
    lrs.sort_by(f64::total_cmp);
    lrs.dedup();
    mus.sort_by(f64::total_cmp);
    mus.dedup();
    let combos: Vec<(f64, f64)> = lrs
        .iter()
        .flat_map(|&lr| mus.iter().map(move |&mu| (lr, mu)))
        .collect();

    let task = Task::build(cfg)?;
    let pool = thread_pool(jobs)?;
    let cells: Vec<GridCell> = pool.install(|| {
        combos
            .par_iter()
            .map(|&(lr, mu)| {
                let mut opt = cfg.optimizer_config();
                opt.learning_rate = lr;
                opt.mu = mu;
                opt.validate(task.model.num_layers())?;
                let outcome = train(&task, &opt, cfg.eval_every, |_, _| Ok(()))?;
                if let Some(dir) = shard_dir {
                    write_steps_csv(&dir.join(format!("lr_{lr:e}_mu_{mu:e}.csv")), &outcome.rows)?;
                }
                let mut diverged = outcome.diverged.is_some();
                let eval_loss = if diverged {
                    f64::NAN
                } else {
                    task.eval_loss(&outcome.final_params)?
                };
                diverged |= !eval_loss.is_finite();
                Ok(GridCell {
                    learning_rate: lr,
                    mu,
                    eval_loss: if diverged { f64::NAN } else { eval_loss },
                    eval_metric: outcome.final_metric,
                    diverged,
                    steps_completed: outcome.steps_completed,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let best = select_best(&cells).cloned();
    Ok(GridResult { cells, best })
}

/// `grid-search` subcommand: `cells/*.csv` shards, `grid_results.csv` and
/// `best.json`.
pub fn run_grid(cfg: &ExperimentConfig, jobs: Option<usize>) -> Result<GridResult> {
    let dir = output_dir(cfg)?;
    let shards = dir.join("cells");
    fs::create_dir_all(&shards).map_err(|e| CliError::io(&shards, e))?;
    let result = grid_search(cfg, jobs, Some(&shards))?;
    let mut w = csv::Writer::from_path(dir.join("grid_results.csv"))?;
    w.write_record([
        "learning_rate",
        "mu",
        "eval_loss",
        "eval_metric",
        "diverged",
        "steps_completed",
    ])?;
    for c in &result.cells {
        w.write_record([
            c.learning_rate.to_string(),
            c.mu.to_string(),
            c.eval_loss.to_string(),
            c.eval_metric.map(|m| m.to_string()).unwrap_or_default(),
            c.diverged.to_string(),
            c.steps_completed.to_string(),
        ])?;
    }
    w.flush().map_err(|e| CliError::io(&dir, e))?;
    write_json(
        &dir.join("best.json"),
        &serde_json::json!({ "seed": cfg.seed, "best": &result.best, "config": cfg }),
    )?;
    Ok(result)
}
