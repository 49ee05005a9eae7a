//! Experiment configuration files.
//!
//! Configs are TOML. Top-level keys: `mode`, `eval_every`, `repeats`,
//! `output_path`; sections `[model]`, `[data]`, `[optimizer]`, `[grid]`,
//! `[bench]`, `[sweep]`. Unknown keys are rejected. See README.md for the
//! full grammar.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use zo_forge_core::models::{DatasetKind, DatasetSpec};
use zo_forge_core::oracle::SweepConfig;
use zo_forge_core::OptimizerConfig;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    BenchTiming,
    SweepConvergence,
    GridSearch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Quadratic,
    Logistic,
    Mlp,
    Transformer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub mode: Option<Mode>,
    #[serde(default = "one")]
    pub eval_every: usize,
    #[serde(default = "one")]
    pub repeats: usize,
    #[serde(default)]
    pub output_path: Option<PathBuf>,
    pub model: ModelSection,
    #[serde(default)]
    pub data: Option<DataSection>,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub grid: Option<GridSection>,
    #[serde(default)]
    pub bench: BenchSection,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
    /// Set from `--seed`; never read from the file.
    #[serde(skip_deserializing, default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    /// Number of droppable layers (quadratic, logistic).
    #[serde(default)]
    pub layers: Option<usize>,
    /// Quadratic dimension.
    #[serde(default)]
    pub d: Option<usize>,
    #[serde(default)]
    pub condition_number: Option<f64>,
    /// MLP hidden width.
    #[serde(default)]
    pub hidden: Option<usize>,
    /// Transformer width, depth and vocabulary.
    #[serde(default)]
    pub dim: Option<usize>,
    #[serde(default)]
    pub blocks: Option<usize>,
    #[serde(default)]
    pub vocab: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default = "default_data_kind")]
    pub kind: String,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub num_samples: usize,
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default = "default_separation")]
    pub separation: f64,
    #[serde(default = "default_eval_fraction")]
    pub eval_fraction: f64,
    /// Defaults to the run seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_data_kind() -> String {
    "synthetic_gaussian_blobs".into()
}

fn default_separation() -> f64 {
    6.0
}

fn default_eval_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub learning_rate: f64,
    pub mu: f64,
    pub steps: usize,
    pub drop_count: usize,
    pub batch_size: usize,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let d = OptimizerConfig::default();
        Self {
            learning_rate: d.learning_rate,
            mu: d.mu,
            steps: d.steps,
            drop_count: d.drop_count,
            batch_size: d.batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub learning_rates: Vec<f64>,
    pub mus: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub warmup_steps: usize,
    pub measure_steps: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            warmup_steps: 10,
            measure_steps: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub d_list: Vec<usize>,
    pub keep_fractions: Vec<f64>,
    pub threshold: f64,
    #[serde(default = "default_sweep_layers")]
    pub layers: usize,
    #[serde(default = "default_condition")]
    pub condition_number: f64,
    #[serde(default = "default_sweep_mu")]
    pub mu: f64,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
}

fn default_sweep_layers() -> usize {
    8
}

fn default_condition() -> f64 {
    1.0
}

fn default_sweep_mu() -> f64 {
    1e-3
}

fn default_max_steps() -> usize {
    1_000_000
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: u64,
    pub output: Option<PathBuf>,
    pub steps: Option<usize>,
    pub learning_rate: Option<f64>,
    pub mu: Option<f64>,
    pub drop_count: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn apply(&mut self, o: &Overrides) {
        self.seed = o.seed;
        if let Some(out) = &o.output {
            self.output_path = Some(out.clone());
        }
        if let Some(v) = o.steps {
            self.optimizer.steps = v;
        }
        if let Some(v) = o.learning_rate {
            self.optimizer.learning_rate = v;
        }
        if let Some(v) = o.mu {
            self.optimizer.mu = v;
        }
        if let Some(v) = o.drop_count {
            self.optimizer.drop_count = v;
        }
    }

    /// Checks value ranges; the message names the offending key.
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(CliError::Config(format!("`{key}` {why}")));
        if self.eval_every == 0 {
            return bad("eval_every", "must be ≥ 1");
        }
        if self.repeats == 0 {
            return bad("repeats", "must be ≥ 1");
        }
        let o = &self.optimizer;
        if !(o.learning_rate >= 0.0 && o.learning_rate.is_finite()) {
            return bad("optimizer.learning_rate", "must be finite and ≥ 0");
        }
        if !(o.mu > 0.0 && o.mu.is_finite()) {
            return bad("optimizer.mu", "must be finite and > 0");
        }
        if o.steps == 0 {
            return bad("optimizer.steps", "must be ≥ 1");
        }
        if o.batch_size == 0 {
            return bad("optimizer.batch_size", "must be ≥ 1");
        }
        if let Some(data) = &self.data {
            DatasetKind::parse(&data.kind).map_err(|_| {
                CliError::Config(format!(
                    "`data.kind` must be one of synthetic_gaussian_blobs, synthetic_quadratic, csv_classification; got `{}`",
                    data.kind
                ))
            })?;
            if !(0.0..1.0).contains(&data.eval_fraction) {
                return bad("data.eval_fraction", "must be in [0, 1)");
            }
        }
        if let Some(grid) = &self.grid {
            if grid.learning_rates.is_empty() || grid.mus.is_empty() {
                return bad("grid", "needs at least one learning rate and one mu");
            }
        }
        if self.bench.measure_steps == 0 {
            return bad("bench.measure_steps", "must be ≥ 1");
        }
        Ok(())
    }

    /// Rejects a file whose `mode` disagrees with the subcommand.
    pub fn check_mode(&self, expected: Mode) -> Result<()> {
        match self.mode {
            Some(m) if m != expected => Err(CliError::Config(format!(
                "`mode` is {m:?} but the subcommand runs {expected:?}"
            ))),
            _ => Ok(()),
        }
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            learning_rate: self.optimizer.learning_rate,
            mu: self.optimizer.mu,
            steps: self.optimizer.steps,
            drop_count: self.optimizer.drop_count,
            batch_size: self.optimizer.batch_size,
            base_seed: self.seed,
        }
    }

    pub fn dataset_spec(&self) -> Result<Option<DatasetSpec>> {
        let Some(data) = &self.data else {
            return Ok(None);
        };
        Ok(Some(DatasetSpec {
            kind: DatasetKind::parse(&data.kind)?,
            feature_dim: data.feature_dim,
            num_classes: data.num_classes,
            num_samples: data.num_samples,
            seed: data.seed.unwrap_or(self.seed),
            path: data.path.clone(),
            separation: data.separation,
            eval_fraction: data.eval_fraction,
        }))
    }

    pub fn sweep_config(&self) -> Result<SweepConfig> {
        let s = self
            .sweep
            .as_ref()
            .ok_or_else(|| CliError::Config("`sweep` section is required".into()))?;
        Ok(SweepConfig {
            d_list: s.d_list.clone(),
            keep_fractions: s.keep_fractions.clone(),
            threshold: s.threshold,
            repeats: self.repeats,
            seed: self.seed,
            layers: s.layers,
            condition_number: s.condition_number,
            mu: s.mu,
            max_steps: s.max_steps,
        })
    }
}
