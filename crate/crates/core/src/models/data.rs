//! Datasets: seeded synthetic generators and a small CSV reader.
//!
//! CSV files are UTF-8, comma-separated, with a header row. Two layouts are
//! accepted:
//!
//! * `label,f0,f1,...`: integer class label followed by real features;
//! * `label,text`: integer class label followed by whitespace-separated
//!   tokens. Tokens get ids in first-seen order starting at 1 (0 pads), and
//!   each row is padded or truncated to `feature_dim` tokens.

use std::collections::HashMap;
use std::path::PathBuf;

use super::{Batch, Labels};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, GaussianStream, NormalSource, SeedPurpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    SyntheticGaussianBlobs,
    SyntheticQuadratic,
    CsvClassification,
}

impl DatasetKind {
    pub fn parse(tag: &str) -> Result<Self> {
        match tag {
            "synthetic_gaussian_blobs" => Ok(Self::SyntheticGaussianBlobs),
            "synthetic_quadratic" => Ok(Self::SyntheticQuadratic),
            "csv_classification" => Ok(Self::CsvClassification),
            other => Err(Error::Argument(format!("unknown dataset kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub num_samples: usize,
    pub seed: u64,
    pub path: Option<PathBuf>,
    /// Distance between blob centres in units of the blob standard deviation.
    pub separation: f64,
    /// Fraction of samples held out for evaluation.
    pub eval_fraction: f64,
}

impl DatasetSpec {
    pub fn blobs(feature_dim: usize, num_classes: usize, num_samples: usize, seed: u64) -> Self {
        Self {
            kind: DatasetKind::SyntheticGaussianBlobs,
            feature_dim,
            num_classes,
            num_samples,
            seed,
            path: None,
            separation: 6.0,
            eval_fraction: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.num_classes == 0 || self.num_samples == 0 {
            return Err(Error::Argument(
                "feature_dim, num_classes and num_samples must be ≥ 1".into(),
            ));
        }
        if self.kind == DatasetKind::CsvClassification && self.path.is_none() {
            return Err(Error::Argument("csv_classification requires a path".into()));
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return Err(Error::Argument("eval_fraction must be in [0, 1)".into()));
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return Err(Error::Argument("separation must be finite and ≥ 0".into()));
        }
        Ok(())
    }
}

/// An in-memory sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Vec<f64>,
    feature_dim: usize,
    labels: Labels,
    num_classes: usize,
    vocab: Option<usize>,
}

impl Dataset {
    pub fn new(
        inputs: Vec<f64>,
        feature_dim: usize,
        labels: Labels,
        num_classes: usize,
    ) -> Result<Self> {
        if inputs.len() != labels.len() * feature_dim {
            return Err(Error::Size(format!(
                "{} inputs for {} samples of width {feature_dim}",
                inputs.len(),
                labels.len()
            )));
        }
        Ok(Self {
            inputs,
            feature_dim,
            labels,
            num_classes,
            vocab: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Token vocabulary size (including the pad id) for token datasets.
    pub fn vocab(&self) -> Option<usize> {
        self.vocab
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn labels(&self) -> &Labels {
        &self.labels
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Batch> {
        let mut inputs = Vec::with_capacity(indices.len() * self.feature_dim);
        for &i in indices {
            inputs.extend_from_slice(self.row(i));
        }
        let labels = match &self.labels {
            Labels::Classes(c) => Labels::Classes(indices.iter().map(|&i| c[i]).collect()),
            Labels::Targets(t) => Labels::Targets(indices.iter().map(|&i| t[i]).collect()),
        };
        Batch::new(inputs, self.feature_dim, labels)
    }

    pub fn full_batch(&self) -> Result<Batch> {
        let all: Vec<usize> = (0..self.len()).collect();
        self.subset(&all)
    }

    fn select(&self, indices: &[usize]) -> Dataset {
        let mut inputs = Vec::with_capacity(indices.len() * self.feature_dim);
        for &i in indices {
            inputs.extend_from_slice(self.row(i));
        }
        let labels = match &self.labels {
            Labels::Classes(c) => Labels::Classes(indices.iter().map(|&i| c[i]).collect()),
            Labels::Targets(t) => Labels::Targets(indices.iter().map(|&i| t[i]).collect()),
        };
        Dataset {
            inputs,
            feature_dim: self.feature_dim,
            labels,
            num_classes: self.num_classes,
            vocab: self.vocab,
        }
    }

    /// Quantizes real features into token ids `1..vocab` by equal-width
    /// binning over `[-range, range]`, so numeric data can drive the
    /// transformer. Id 0 stays reserved for padding.
    pub fn quantized(&self, vocab: usize, range: f64) -> Result<Dataset> {
        if vocab < 2 {
            return Err(Error::Argument(
                "quantizing needs a vocabulary of at least 2".into(),
            ));
        }
        let bins = (vocab - 1) as f64;
        let inputs = self
            .inputs
            .iter()
            .map(|&x| {
                let unit = ((x + range) / (2.0 * range)).clamp(0.0, 1.0);
                1.0 + (unit * bins).floor().min(bins - 1.0)
            })
            .collect();
        Ok(Dataset {
            inputs,
            feature_dim: self.feature_dim,
            labels: self.labels.clone(),
            num_classes: self.num_classes,
            vocab: Some(vocab),
        })
    }
}

/// Builds the dataset and splits it into `(train, eval)`.
pub fn load_dataset(spec: &DatasetSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let all = match spec.kind {
        DatasetKind::SyntheticGaussianBlobs => gaussian_blobs(spec),
        DatasetKind::SyntheticQuadratic => quadratic_samples(spec),
        DatasetKind::CsvClassification => {
            let path = spec.path.as_ref().expect("validated above");
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
            parse_csv(&text, spec)?
        }
    };
    Ok(split(&all, spec.eval_fraction, spec.seed))
}

fn split(all: &Dataset, eval_fraction: f64, seed: u64) -> (Dataset, Dataset) {
    let n = all.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut stream = GaussianStream::new(seed ^ 0x5EED_5711);
    for i in (1..n).rev() {
        let j = stream.next_below(i as u64 + 1) as usize;
        order.swap(i, j);
    }
    let mut n_eval = (eval_fraction * n as f64).round() as usize;
    if n_eval == n {
        n_eval = n - 1;
    }
    let (eval, train) = order.split_at(n_eval);
    let mut train = train.to_vec();
    let mut eval = eval.to_vec();
    train.sort_unstable();
    eval.sort_unstable();
    (all.select(&train), all.select(&eval))
}

fn blob_centres(spec: &DatasetSpec, stream: &mut GaussianStream) -> Vec<Vec<f64>> {
    let (f, c, sep) = (spec.feature_dim, spec.num_classes, spec.separation);
    if c == 1 {
        return vec![vec![0.0; f]];
    }
    if c == 2 {
        let mut u: Vec<f64> = (0..f).map(|_| stream.next_normal()).collect();
        let norm = u
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
            .max(f64::MIN_POSITIVE);
        u.iter_mut().for_each(|v| *v /= norm);
        let half = sep / 2.0;
        return vec![
            u.iter().map(|v| -half * v).collect(),
            u.iter().map(|v| half * v).collect(),
        ];
    }
    if f >= c {
        // Scaled axes: pairwise distance exactly `sep`.
        let a = sep / std::f64::consts::SQRT_2;
        return (0..c)
            .map(|k| (0..f).map(|j| if j == k { a } else { 0.0 }).collect())
            .collect();
    }
    if f >= 2 {
        let radius = sep / (2.0 * (std::f64::consts::PI / c as f64).sin());
        return (0..c)
            .map(|k| {
                let angle = std::f64::consts::TAU * k as f64 / c as f64;
                let mut v = vec![0.0; f];
                v[0] = radius * angle.cos();
                v[1] = radius * angle.sin();
                v
            })
            .collect();
    }
    (0..c).map(|k| vec![sep * k as f64]).collect()
}

fn gaussian_blobs(spec: &DatasetSpec) -> Dataset {
    let mut stream = GaussianStream::new(spec.seed);
    let centres = blob_centres(spec, &mut stream);
    let mut inputs = Vec::with_capacity(spec.num_samples * spec.feature_dim);
    let mut labels = Vec::with_capacity(spec.num_samples);
    for i in 0..spec.num_samples {
        let k = i % spec.num_classes;
        labels.push(k);
        for &mu in &centres[k] {
            inputs.push(mu + stream.next_normal());
        }
    }
    Dataset::new(
        inputs,
        spec.feature_dim,
        Labels::Classes(labels),
        spec.num_classes,
    )
    .expect("generator sizes are consistent")
}

fn quadratic_samples(spec: &DatasetSpec) -> Dataset {
    let mut stream = GaussianStream::new(spec.seed);
    let inputs: Vec<f64> = (0..spec.num_samples * spec.feature_dim)
        .map(|_| stream.next_normal())
        .collect();
    let targets = inputs
        .chunks_exact(spec.feature_dim)
        .map(|x| 0.5 * x.iter().map(|v| v * v).sum::<f64>())
        .collect();
    Dataset::new(inputs, spec.feature_dim, Labels::Targets(targets), 1)
        .expect("generator sizes are consistent")
}

fn parse_csv(text: &str, spec: &DatasetSpec) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.trim_start_matches('\u{feff}').as_bytes());
    let columns: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Parse {
            row: 0,
            message: format!("unreadable header: {e}"),
        })?
        .iter()
        .map(str::to_string)
        .collect();
    if columns.first().map(String::as_str) != Some("label") || columns.len() < 2 {
        return Err(Error::Argument(format!(
            "header must be `label,f0,...` or `label,text`, got `{}`",
            columns.join(",")
        )));
    }
    let is_text = columns.len() == 2 && columns[1] == "text";
    let width = if is_text {
        spec.feature_dim
    } else {
        columns.len() - 1
    };

    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    let mut vocab: HashMap<String, usize> = HashMap::new();
    for (row, record) in reader.records().enumerate() {
        let bad = |message: String| Error::Parse { row, message };
        let record = record.map_err(|e| bad(e.to_string()))?;
        if record.len() < 2 {
            return Err(bad("expected at least two fields".into()));
        }
        let label: usize = record[0]
            .parse()
            .map_err(|_| bad(format!("label `{}` is not a class index", &record[0])))?;
        if label >= spec.num_classes {
            return Err(bad(format!(
                "label {label} out of range for {} classes",
                spec.num_classes
            )));
        }
        if is_text {
            if record.len() != 2 {
                return Err(bad(format!("expected 2 fields, found {}", record.len())));
            }
            let mut ids: Vec<f64> = record[1]
                .split_whitespace()
                .take(width)
                .map(|tok| {
                    let next = vocab.len() + 1;
                    *vocab.entry(tok.to_string()).or_insert(next) as f64
                })
                .collect();
            ids.resize(width, 0.0);
            inputs.extend(ids);
        } else {
            if record.len() != width + 1 {
                return Err(bad(format!(
                    "expected {} fields, found {}",
                    width + 1,
                    record.len()
                )));
            }
            for field in record.iter().skip(1) {
                let v: f64 = field
                    .parse()
                    .map_err(|_| bad(format!("`{field}` is not a number")))?;
                if !v.is_finite() {
                    return Err(bad(format!("non-finite feature `{field}`")));
                }
                inputs.push(v);
            }
        }
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::Parse {
            row: 0,
            message: "no data rows".into(),
        });
    }
    let mut data = Dataset::new(inputs, width, Labels::Classes(labels), spec.num_classes)?;
    if is_text {
        data.vocab = Some(vocab.len() + 1);
    }
    Ok(data)
}

/// Draws `batch_size` distinct samples; a pure function of `(seed, step)`.
pub fn sample_batch(data: &Dataset, batch_size: usize, seed: u64, step: u64) -> Result<Batch> {
    let n = data.len();
    if batch_size == 0 || batch_size > n {
        return Err(Error::Argument(format!(
            "batch size {batch_size} not in [1, {n}]"
        )));
    }
    let mut stream = GaussianStream::new(derive_seed(seed, SeedPurpose::BatchSample, step));
    let mut order: Vec<usize> = (0..n).collect();
    for i in 0..batch_size {
        let j = i + stream.next_below((n - i) as u64) as usize;
        order.swap(i, j);
    }
    data.subset(&order[..batch_size])
}
