use zo_forge_core::models::{
    load_dataset, make_logistic, make_mlp, make_quadratic, make_tiny_transformer, sample_batch,
    Batch, Dataset, Objective,
};

use crate::config::{ExperimentConfig, ModelKind};
use crate::error::{CliError, Result};

/// Range used to bin real features into tokens for the transformer.
const TOKEN_RANGE: f64 = 6.0;

/// A model together with its train/eval data.
pub struct Task {
    pub kind: ModelKind,
    pub model: Box<dyn Objective<f64>>,
    pub train: Option<Dataset>,
    pub eval: Option<Dataset>,
}

fn need<T: Copy>(value: Option<T>, key: &str) -> Result<T> {
    value.ok_or_else(|| CliError::Config(format!("`model.{key}` is required for this model kind")))
}

impl Task {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        let m = &cfg.model;
        let init_seed = cfg.seed;
        let split = match cfg.dataset_spec()? {
            Some(spec) => Some(load_dataset(&spec)?),
            None => None,
        };
        let data_dims = || -> Result<(usize, usize)> {
            match &split {
                Some((train, _)) => Ok((train.feature_dim(), train.num_classes())),
                None => Err(CliError::Config(format!(
                    "a `data` section is required for model kind {:?}",
                    m.kind
                ))),
            }
        };
        let (model, split): (Box<dyn Objective<f64>>, _) = match m.kind {
            ModelKind::Quadratic => {
                let d = need(m.d, "d")?;
                let layers = m.layers.unwrap_or(1);
                let cond = m.condition_number.unwrap_or(1.0);
                (Box::new(make_quadratic(d, layers, cond, init_seed)?), None)
            }
            ModelKind::Logistic => {
                let (f, c) = data_dims()?;
                let layers = m.layers.unwrap_or(1);
                (Box::new(make_logistic(f, c, layers, init_seed)?), split)
            }
            ModelKind::Mlp => {
                let (f, c) = data_dims()?;
                (
                    Box::new(make_mlp(f, need(m.hidden, "hidden")?, c, init_seed)?),
                    split,
                )
            }
            ModelKind::Transformer => {
                let (f, c) = data_dims()?;
                let (train, eval) = split.expect("checked by data_dims");
                let (train, eval, vocab) = match train.vocab() {
                    Some(v) => (train, eval, m.vocab.unwrap_or(v).max(v)),
                    None => {
                        let v = need(m.vocab, "vocab")?;
                        (
                            train.quantized(v, TOKEN_RANGE)?,
                            eval.quantized(v, TOKEN_RANGE)?,
                            v,
                        )
                    }
                };
                let model = make_tiny_transformer(
                    vocab,
                    f,
                    need(m.dim, "dim")?,
                    need(m.blocks, "blocks")?,
                    c,
                    init_seed,
                )?;
                (Box::new(model), Some((train, eval)))
            }
        };
        let (train, eval) = match split {
            Some((t, e)) => (Some(t), Some(e)),
            None => (None, None),
        };
        Ok(Self {
            kind: m.kind,
            model,
            train,
            eval,
        })
    }

    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        self.model.init_params(seed)
    }

    /// Minibatch for step `t`, or the unit batch for data-free objectives.
    pub fn batch(&self, batch_size: usize, seed: u64, t: usize) -> Result<Batch> {
        match &self.train {
            Some(train) => Ok(sample_batch(
                train,
                batch_size.min(train.len()),
                seed,
                t as u64,
            )?),
            None => Ok(Batch::unit()),
        }
    }

    fn eval_batch(&self) -> Result<Batch> {
        match &self.eval {
            Some(eval) if !eval.is_empty() => Ok(eval.full_batch()?),
            Some(_) => Err(CliError::Config(
                "`data.eval_fraction` leaves no eval samples".into(),
            )),
            None => Ok(Batch::unit()),
        }
    }

    /// Held-out accuracy for classifiers, loss otherwise.
    pub fn eval_metric(&self, params: &[f64]) -> Result<f64> {
        let batch = self.eval_batch()?;
        Ok(self
            .model
            .accuracy(params, &batch)
            .unwrap_or_else(|| self.model.loss(params, &batch)))
    }

    pub fn eval_loss(&self, params: &[f64]) -> Result<f64> {
        Ok(self.model.loss(params, &self.eval_batch()?))
    }

    /// Whether larger eval metrics are better.
    pub fn metric_is_accuracy(&self) -> bool {
        self.kind != ModelKind::Quadratic
    }
}
