//! Command-line front end for zeroth-order training experiments.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod grid;
pub mod speedup;
pub mod sweep;
pub mod task;
pub mod timing;
pub mod train;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{ExperimentConfig, Mode, Overrides};
use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(
    name = "zo-forge",
    version,
    about = "Zeroth-order training with layer-wise sparse perturbations"
)]
pub struct Cli {
    /// Worker threads for grid and sweep cells (default: all cores).
    #[arg(long, global = true, env = "ZO_FORGE_THREADS")]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model; writes steps.csv, summary.json, checkpoint.bin.
    Train(RunArgs),
    /// Time MeZO against LeZO phase by phase; writes timing.json.
    BenchTiming(RunArgs),
    /// Train every learning-rate/mu combination; writes grid_results.csv, best.json.
    GridSearch(RunArgs),
    /// Steps-to-threshold over dimensions and keep fractions on quadratics.
    SweepConvergence(RunArgs),
    /// Compare a dense and a sparse run's step CSVs.
    ReportSpeedup(SpeedupArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub drop_count: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    Accuracy,
    Loss,
}

#[derive(Debug, Args)]
pub struct SpeedupArgs {
    /// Step CSV of the dense (MeZO) run.
    #[arg(long)]
    pub dense: PathBuf,
    /// Step CSV of the sparse (LeZO) run.
    #[arg(long)]
    pub sparse: PathBuf,
    /// Eval metric value both runs should reach.
    #[arg(long)]
    pub target: f64,
    #[arg(long, value_enum, default_value_t = Metric::Accuracy)]
    pub metric: Metric,
    /// JSON report path.
    #[arg(long)]
    pub output: PathBuf,
}

pub fn load_config(args: &RunArgs, mode: Mode) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    cfg.check_mode(mode)?;
    cfg.apply(&Overrides {
        seed: args.seed,
        output: Some(args.output.clone()),
        steps: args.steps,
        learning_rate: args.learning_rate,
        mu: args.mu,
        drop_count: args.drop_count,
    });
    cfg.validate()?;
    Ok(cfg)
}

/// Executes one command, printing a short report to stdout.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let cfg = load_config(&args, Mode::Train)?;
            for (r, out) in train::run_train(&cfg)?.iter().enumerate() {
                if let Some(why) = &out.diverged {
                    return Err(CliError::Format(format!("repeat {r} diverged at {why}")));
                }
                let show = |v: Option<String>| v.unwrap_or_else(|| "-".into());
                println!(
                    "repeat {r}: {} steps, final eval {}, best {} at step {}, {:.2}s",
                    out.steps_completed,
                    show(out.final_metric.map(|m| format!("{m:.6}"))),
                    show(out.best_metric.map(|m| format!("{m:.6}"))),
                    show(out.best_step.map(|s| s.to_string())),
                    out.wall_time_s
                );
            }
        }
        Command::BenchTiming(args) => {
            let cfg = load_config(&args, Mode::BenchTiming)?;
            let dir = train::output_dir(&cfg)?;
            let task = task::Task::build(&cfg)?;
            let report = timing::bench_timing(
                &task,
                &cfg.optimizer_config(),
                cfg.bench.warmup_steps,
                cfg.bench.measure_steps,
            )?;
            train::write_json(&dir.join("timing.json"), &report)?;
            let table = timing::render_table(&report);
            std::fs::write(dir.join("timing.txt"), &table).map_err(|e| CliError::io(&dir, e))?;
            print!("{table}");
        }
        Command::GridSearch(args) => {
            let cfg = load_config(&args, Mode::GridSearch)?;
            let result = grid::run_grid(&cfg, cli.jobs)?;
            for c in &result.cells {
                println!(
                    "lr {:<10} mu {:<10} eval loss {:<22} {}",
                    c.learning_rate,
                    c.mu,
                    c.eval_loss,
                    if c.diverged { "diverged" } else { "" }
                );
            }
            match &result.best {
                Some(b) => println!("best: lr {} mu {}", b.learning_rate, b.mu),
                None => println!("best: none (every cell diverged)"),
            }
        }
        Command::SweepConvergence(args) => {
            let cfg = load_config(&args, Mode::SweepConvergence)?;
            let (_, summary) = sweep::run_sweep(&cfg, cli.jobs)?;
            let show = |v: Option<f64>, digits: usize| {
                v.map_or_else(|| "-".to_string(), |x| format!("{x:.digits$}"))
            };
            for &(d, keep, active, mean) in &summary.cells {
                println!(
                    "d {d:<8} keep {keep:<6} active {active:<8} mean steps {}",
                    show(mean, 1)
                );
            }
            println!(
                "spearman(active dim, steps) = {}",
                show(summary.spearman, 3)
            );
        }
        Command::ReportSpeedup(args) => {
            let dense = train::read_steps_csv(&args.dense)?;
            let sparse = train::read_steps_csv(&args.sparse)?;
            let report = speedup::report_speedup(
                &dense,
                &sparse,
                args.target,
                args.metric == Metric::Accuracy,
            );
            train::write_json(&args.output, &report)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(())
}
