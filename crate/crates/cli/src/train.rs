use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use zo_forge_core::{Error as CoreError, OptimizerConfig, ParameterVector, ZoOptimizer};

use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::task::Task;

pub const CSV_HEADER: [&str; 9] = [
    "step",
    "loss_plus",
    "loss_minus",
    "projected_grad",
    "eval_metric",
    "time_forward_ns",
    "time_perturb_ns",
    "time_update_ns",
    "alloc_delta_bytes",
];

/// One row of the per-step CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRow {
    pub step: usize,
    pub loss_plus: f64,
    pub loss_minus: f64,
    pub projected_grad: f64,
    /// Present on evaluation steps only.
    pub eval_metric: Option<f64>,
    pub time_forward_ns: u64,
    pub time_perturb_ns: u64,
    pub time_update_ns: u64,
    pub alloc_delta_bytes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunOutcome {
    #[serde(skip)]
    pub rows: Vec<StepRow>,
    #[serde(skip)]
    pub final_params: Vec<f64>,
    pub steps_completed: usize,
    pub final_metric: Option<f64>,
    pub best_metric: Option<f64>,
    pub best_step: Option<usize>,
    /// Set when a loss went non-finite; the run stops at that step.
    pub diverged: Option<String>,
    pub wall_time_s: f64,
}

/// Runs `opt.steps` LeZO steps (MeZO when `drop_count == 0`), evaluating
/// every `eval_every` steps and after the last one. `on_best` sees each
/// new best evaluation.
pub fn train(
    task: &Task,
    opt: &OptimizerConfig,
    eval_every: usize,
    mut on_best: impl FnMut(usize, &ParameterVector) -> Result<()>,
) -> Result<RunOutcome> {
    let start = Instant::now();
    let mut pv = ParameterVector::new(
        task.init_params(opt.base_seed),
        task.model.partition().clone(),
    )?;
    let mut optimizer = ZoOptimizer::new(opt.clone());
    let higher_is_better = task.metric_is_accuracy();
    let mut rows = Vec::with_capacity(opt.steps);
    let mut best: Option<(usize, f64)> = None;
    let mut final_metric = None;
    let mut diverged = None;

    for t in 0..opt.steps {
        let batch = task.batch(opt.batch_size, opt.base_seed, t)?;
        let record = match optimizer.lezo_step(&mut pv, task.model.as_ref(), &batch, t) {
            Ok(r) => r,
            Err(CoreError::Numeric(msg)) => {
                diverged = Some(format!("step {t}: {msg}"));
                break;
            }
            Err(e) => return Err(e.into()),
        };
        let mut eval_metric = None;
        if (t + 1) % eval_every == 0 || t + 1 == opt.steps {
            let m = task.eval_metric(pv.values())?;
            eval_metric = Some(m);
            final_metric = Some(m);
            let improved = match best {
                None => m.is_finite(),
                Some((_, b)) => {
                    if higher_is_better {
                        m > b
                    } else {
                        m < b
                    }
                }
            };
            if improved {
                best = Some((t, m));
                on_best(t, &pv)?;
            }
        }
        rows.push(StepRow {
            step: t,
            loss_plus: record.loss_plus,
            loss_minus: record.loss_minus,
            projected_grad: record.projected_grad,
            eval_metric,
            time_forward_ns: record.time_forward_ns,
            time_perturb_ns: record.time_perturb_ns,
            time_update_ns: record.time_update_ns,
            alloc_delta_bytes: record.alloc_delta_bytes,
        });
    }
    if diverged.is_none() && !pv.is_finite() {
        diverged = Some("parameters became non-finite".into());
    }
    Ok(RunOutcome {
        steps_completed: rows.len(),
        rows,
        final_params: pv.into_values(),
        final_metric,
        best_metric: best.map(|b| b.1),
        best_step: best.map(|b| b.0),
        diverged,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

fn opt_field<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes the per-step CSV. Floats use Rust's shortest round-trip format.
pub fn write_steps_csv(path: &Path, rows: &[StepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.loss_plus.to_string(),
            r.loss_minus.to_string(),
            r.projected_grad.to_string(),
            opt_field(r.eval_metric),
            r.time_forward_ns.to_string(),
            r.time_perturb_ns.to_string(),
            r.time_update_ns.to_string(),
            opt_field(r.alloc_delta_bytes),
        ])?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_steps_csv(path: &Path) -> Result<Vec<StepRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(CliError::Format(format!(
            "{}: unexpected header {header:?}",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |col: &str| CliError::Format(format!("{}: row {i}: bad `{col}`", path.display()));
        let f = |idx: usize| -> Result<f64> { rec[idx].parse().map_err(|_| bad(CSV_HEADER[idx])) };
        let u = |idx: usize| -> Result<u64> { rec[idx].parse().map_err(|_| bad(CSV_HEADER[idx])) };
        rows.push(StepRow {
            step: u(0)? as usize,
            loss_plus: f(1)?,
            loss_minus: f(2)?,
            projected_grad: f(3)?,
            eval_metric: if rec[4].is_empty() { None } else { Some(f(4)?) },
            time_forward_ns: u(5)?,
            time_perturb_ns: u(6)?,
            time_update_ns: u(7)?,
            alloc_delta_bytes: if rec[8].is_empty() {
                None
            } else {
                Some(u(8)? as usize)
            },
        });
    }
    Ok(rows)
}

pub fn output_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg
        .output_path
        .clone()
        .ok_or_else(|| CliError::Config("`--output` is required".into()))?;
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    Ok(dir)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

/// Seed for repeat `r`; repeat 0 uses the run seed itself.
pub fn repeat_seed(seed: u64, r: usize) -> u64 {
    seed.wrapping_add(r as u64)
}

/// `train` subcommand: writes `steps.csv`, `summary.json` and
/// `checkpoint.bin` (best eval) per repeat.
pub fn run_train(cfg: &ExperimentConfig) -> Result<Vec<RunOutcome>> {
    let root = output_dir(cfg)?;
    let mut outcomes = Vec::with_capacity(cfg.repeats);
    for r in 0..cfg.repeats {
        let dir = if cfg.repeats == 1 {
            root.clone()
        } else {
            let d = root.join(format!("repeat_{r}"));
            fs::create_dir_all(&d).map_err(|e| CliError::io(&d, e))?;
            d
        };
        let mut run_cfg = cfg.clone();
        run_cfg.seed = repeat_seed(cfg.seed, r);
        let task = Task::build(&run_cfg)?;
        let ckpt = dir.join("checkpoint.bin");
        let outcome = train(
            &task,
            &run_cfg.optimizer_config(),
            cfg.eval_every,
            |_, pv| checkpoint::write(&ckpt, pv.values(), pv.partition()),
        )?;
        write_steps_csv(&dir.join("steps.csv"), &outcome.rows)?;
        let summary = serde_json::json!({
            "seed": run_cfg.seed,
            "d": task.model.dim(),
            "num_layers": task.model.num_layers(),
            "eval_metric": if task.metric_is_accuracy() { "accuracy" } else { "loss" },
            "result": &outcome,
            "config": &run_cfg,
        });
        write_json(&dir.join("summary.json"), &summary)?;
        outcomes.push(outcome);
    }
    Ok(outcomes)
}
