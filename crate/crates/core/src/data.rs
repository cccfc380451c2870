//! Tabular tasks: CSV ingestion, synthetic generators, splits and
//! normalization.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum TaskKind {
    Classification { classes: usize },
    Regression,
}

impl TaskKind {
    /// Width of the model output.
    pub fn outputs(self) -> usize {
        match self {
            TaskKind::Classification { classes } => classes,
            TaskKind::Regression => 1,
        }
    }

    pub fn is_classification(self) -> bool {
        matches!(self, TaskKind::Classification { .. })
    }
}

/// How rows are divided into train / validation / test.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitPreset {
    /// 60:20:20.
    #[default]
    Tabular,
    /// 20% test; 10% of the remainder for validation.
    ValidationTenth,
}

impl SplitPreset {
    /// `(train, val, test)` sizes for `n` rows.
    pub fn sizes(self, n: usize) -> (usize, usize, usize) {
        let r = |x: f64| x.round() as usize;
        match self {
            SplitPreset::Tabular => {
                let train = r(0.6 * n as f64);
                let val = r(0.2 * n as f64).min(n - train);
                (train, val, n - train - val)
            }
            SplitPreset::ValidationTenth => {
                let test = r(0.2 * n as f64);
                let val = r(0.1 * (n - test) as f64);
                (n - test - val, val, test)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    /// Shuffles `0..n` under `seed` and cuts it by `preset`.
    pub fn shuffled(n: usize, preset: SplitPreset, seed: u64) -> Self {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (tr, va, _) = preset.sizes(n);
        let test = idx.split_off(tr + va);
        let val = idx.split_off(tr);
        Splits { train: idx, val, test }
    }
}

/// Train-split statistics applied to every row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub feature_mean: Vec<f64>,
    pub feature_sd: Vec<f64>,
    /// Regression only.
    pub label_mean: f64,
    pub label_sd: f64,
}

fn mean_sd(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    if n == 0 {
        return (0.0, 1.0);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let sd = var.sqrt();
    // Constant columns keep their scale instead of dividing by zero.
    let sd = if sd > 1e-12 { sd } else { 1.0 };
    (mean, sd)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    kind: TaskKind,
    /// Normalized features, `[n, d]`.
    x: Tensor,
    /// Class index (as f64) or normalized real target.
    y: Vec<f64>,
    splits: Splits,
    stats: Normalization,
    /// Original label of each dense class index.
    label_map: Option<Vec<f64>>,
}

impl TaskDataset {
    /// Splits and normalizes raw rows. Classification labels must already be
    /// dense indices in `0..classes`.
    pub fn new(kind: TaskKind, rows: Vec<Vec<f64>>, targets: Vec<f64>, splits: Splits) -> Result<Self> {
        let n = rows.len();
        if n == 0 || targets.len() != n {
            return Err(Error::usage("dataset needs one target per row and at least one row"));
        }
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::usage("feature rows differ in length"));
        }
        let mut seen = vec![false; n];
        for &i in splits.train.iter().chain(&splits.val).chain(&splits.test) {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(Error::usage("splits must be disjoint and index existing rows"));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::usage("splits must cover every row"));
        }
        if let TaskKind::Classification { classes } = kind {
            if classes < 2
                || targets
                    .iter()
                    .any(|&t| t < 0.0 || t.fract() != 0.0 || t as usize >= classes)
            {
                return Err(Error::usage(
                    "classification targets must be indices below the class count",
                ));
            }
        }

        let train = &splits.train;
        let mut feature_mean = Vec::with_capacity(d);
        let mut feature_sd = Vec::with_capacity(d);
        // Column `j` is gathered across the training rows.
        #[allow(clippy::needless_range_loop)]
        for j in 0..d {
            let (m, s) = mean_sd(train.iter().map(|&i| rows[i][j]));
            feature_mean.push(m);
            feature_sd.push(s);
        }
        let (label_mean, label_sd) = match kind {
            TaskKind::Regression => mean_sd(train.iter().map(|&i| targets[i])),
            TaskKind::Classification { .. } => (0.0, 1.0),
        };
        let mut data = Vec::with_capacity(n * d);
        for r in &rows {
            data.extend(r.iter().enumerate().map(|(j, v)| (v - feature_mean[j]) / feature_sd[j]));
        }
        let y = targets.iter().map(|t| (t - label_mean) / label_sd).collect();
        Ok(Self {
            kind,
            x: Tensor::matrix(n, d, data)?,
            y,
            splits,
            stats: Normalization {
                feature_mean,
                feature_sd,
                label_mean,
                label_sd,
            },
            label_map: None,
        })
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn features(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn x(&self) -> &Tensor {
        &self.x
    }

    pub fn targets(&self) -> &[f64] {
        &self.y
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    pub fn normalization(&self) -> &Normalization {
        &self.stats
    }

    pub fn label_map(&self) -> Option<&[f64]> {
        self.label_map.as_deref()
    }

    /// Features of `rows` as `[b, d]`.
    pub fn features_of(&self, rows: &[usize]) -> Tensor {
        let d = self.features();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(self.x.row(r));
        }
        Tensor::matrix(rows.len(), d, out).expect("consistent shape")
    }

    /// Targets of `rows` as `[b, outputs]`: one-hot or a single column.
    pub fn target_matrix(&self, rows: &[usize]) -> Tensor {
        let k = self.kind.outputs();
        let mut out = vec![0.0; rows.len() * k];
        for (i, &r) in rows.iter().enumerate() {
            match self.kind {
                TaskKind::Classification { .. } => out[i * k + self.y[r] as usize] = 1.0,
                TaskKind::Regression => out[i] = self.y[r],
            }
        }
        Tensor::matrix(rows.len(), k, out).expect("consistent shape")
    }

    pub fn batch(&self, rows: &[usize]) -> (Tensor, Tensor) {
        (self.features_of(rows), self.target_matrix(rows))
    }

    /// Error rate (classification) or mean squared error (regression) of
    /// `predictions` (`[rows, outputs]`) against the targets of `rows`.
    pub fn metric(&self, rows: &[usize], predictions: &Tensor) -> f64 {
        if rows.is_empty() {
            return 0.0;
        }
        let per_row = rows.iter().enumerate().map(|(i, &r)| match self.kind {
            TaskKind::Classification { .. } => f64::from(argmax(predictions.row(i)) != self.y[r] as usize),
            TaskKind::Regression => (predictions.row(i)[0] - self.y[r]).powi(2),
        });
        per_row.sum::<f64>() / rows.len() as f64
    }

    /// Synthetic Gaussian blobs. Two classes sit at `±sep/2` along a random
    /// unit direction; more classes get random directions at radius `sep/2`.
    pub fn blobs(classes: usize, dim: usize, separation: f64, n: usize, seed: u64) -> Result<Self> {
        if classes < 2 || dim < 1 || n < 10 {
            return Err(Error::usage("blobs need classes >= 2, dim >= 1 and n >= 10"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = |rng: &mut ChaCha8Rng| {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / norm).collect::<Vec<f64>>()
        };
        let centres: Vec<Vec<f64>> = if classes == 2 {
            let u = unit(&mut rng);
            let c: Vec<f64> = u.iter().map(|x| x * separation / 2.0).collect();
            vec![c.iter().map(|x| -x).collect(), c]
        } else {
            (0..classes)
                .map(|_| unit(&mut rng).into_iter().map(|x| x * separation / 2.0).collect())
                .collect()
        };
        let mut rows = Vec::with_capacity(n);
        let mut targets = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % classes;
            rows.push(
                centres[c]
                    .iter()
                    .map(|m| m + rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            );
            targets.push(c as f64);
        }
        let splits = Splits::shuffled(n, SplitPreset::Tabular, rng.random());
        Self::new(TaskKind::Classification { classes }, rows, targets, splits)
    }

    /// `y = w·x + noise·N(0,1)` with `w, x ~ N(0, I)`.
    pub fn linear_regression(dim: usize, noise: f64, n: usize, seed: u64) -> Result<Self> {
        if dim < 1 || n < 10 || !(noise >= 0.0) {
            return Err(Error::usage("linear regression needs dim >= 1, n >= 10, noise >= 0"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let mut rows = Vec::with_capacity(n);
        let mut targets = Vec::with_capacity(n);
        for _ in 0..n {
            let x: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let eps: f64 = rng.sample(StandardNormal);
            targets.push(x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + noise * eps);
            rows.push(x);
        }
        let splits = Splits::shuffled(n, SplitPreset::Tabular, rng.random());
        Self::new(TaskKind::Regression, rows, targets, splits)
    }

    /// Reads a numeric CSV. Classification labels are remapped to dense
    /// indices in ascending order of their original value.
    pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(schema.header)
            .flexible(false)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| csv_error(path, e))?;
        let mut rows = Vec::new();
        let mut raw_targets = Vec::new();
        let mut width = None;
        for (i, record) in reader.records().enumerate() {
            let record = record.map_err(|e| csv_error(path, e))?;
            let line = record.position().map_or(i + 1, |p| p.line() as usize);
            let w = *width.get_or_insert(record.len());
            if schema.target >= w {
                return Err(Error::usage(format!(
                    "target column {} is out of range for {} columns",
                    schema.target, w
                )));
            }
            let mut features = Vec::with_capacity(w - 1);
            for (j, cell) in record.iter().enumerate() {
                let v: f64 = cell.parse().map_err(|_| Error::Parse {
                    position: line,
                    message: format!("row {line}, column {}: `{cell}` is not a number", j + 1),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        position: line,
                        message: format!("row {line}, column {}: non-finite value", j + 1),
                    });
                }
                if j == schema.target {
                    raw_targets.push(v);
                } else {
                    features.push(v);
                }
            }
            rows.push(features);
        }
        if rows.len() < 3 {
            return Err(Error::usage("a CSV task needs at least 3 rows"));
        }
        let splits = Splits::shuffled(rows.len(), schema.split, schema.seed);
        match schema.kind {
            CsvTaskKind::Regression => Self::new(TaskKind::Regression, rows, raw_targets, splits),
            CsvTaskKind::Classification => {
                for (i, t) in raw_targets.iter().enumerate() {
                    if t.fract() != 0.0 {
                        let line = i + 1 + usize::from(schema.header);
                        return Err(Error::Parse {
                            position: line,
                            message: format!("row {line}: classification label {t} is not integral"),
                        });
                    }
                }
                let labels: Vec<f64> = {
                    let mut l: Vec<f64> = raw_targets.clone();
                    l.sort_by(f64::total_cmp);
                    l.dedup();
                    l
                };
                if labels.len() < 2 {
                    return Err(Error::usage("classification needs at least two distinct labels"));
                }
                let index = |t: f64| labels.binary_search_by(|l| l.total_cmp(&t)).expect("seen label");
                let targets = raw_targets.iter().map(|&t| index(t) as f64).collect();
                let mut ds = Self::new(
                    TaskKind::Classification { classes: labels.len() },
                    rows,
                    targets,
                    splits,
                )?;
                ds.label_map = Some(labels);
                Ok(ds)
            }
        }
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if let csv::ErrorKind::UnequalLengths { pos, expected_len, len } = e.kind() {
        let line = pos.as_ref().map_or(0, |p| p.line() as usize);
        return Error::Parse {
            position: line,
            message: format!("row {line}: expected {expected_len} columns, found {len}"),
        };
    }
    if let csv::ErrorKind::Io(_) = e.kind() {
        let csv::ErrorKind::Io(io) = e.into_kind() else {
            unreachable!()
        };
        return Error::io(path, io);
    }
    Error::Csv(e)
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CsvTaskKind {
    Classification,
    Regression,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    /// Zero-based column holding the target.
    pub target: usize,
    pub kind: CsvTaskKind,
    #[serde(default)]
    pub header: bool,
    #[serde(default)]
    pub split: SplitPreset,
    #[serde(default)]
    pub seed: u64,
}

/// Where a task comes from; shared by config files and the command line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    Blobs {
        classes: usize,
        dim: usize,
        separation: f64,
        n: usize,
        #[serde(default)]
        seed: u64,
    },
    Linreg {
        dim: usize,
        noise: f64,
        n: usize,
        #[serde(default)]
        seed: u64,
    },
    Csv {
        path: PathBuf,
        target: usize,
        kind: CsvTaskKind,
        #[serde(default)]
        header: bool,
        #[serde(default)]
        split: SplitPreset,
        #[serde(default)]
        seed: u64,
    },
}

impl DatasetSpec {
    pub fn load(&self) -> Result<TaskDataset> {
        match self {
            DatasetSpec::Blobs {
                classes,
                dim,
                separation,
                n,
                seed,
            } => TaskDataset::blobs(*classes, *dim, *separation, *n, *seed),
            DatasetSpec::Linreg { dim, noise, n, seed } => TaskDataset::linear_regression(*dim, *noise, *n, *seed),
            DatasetSpec::Csv {
                path,
                target,
                kind,
                header,
                split,
                seed,
            } => TaskDataset::load_csv(
                path,
                &CsvSchema {
                    target: *target,
                    kind: *kind,
                    header: *header,
                    split: *split,
                    seed: *seed,
                },
            ),
        }
    }

    /// Parses `blobs:classes=2,dim=2,separation=4,n=500`,
    /// `linreg:dim=3,noise=0.1,n=400` or `csv:path=data.csv,target=4,kind=classification`.
    pub fn parse(text: &str) -> Result<Self> {
        let (source, rest) = text.split_once(':').unwrap_or((text, ""));
        let mut table = crate::config::key_value_table(rest, &["separation", "noise"])?;
        table.insert("source".into(), toml::Value::String(source.trim().into()));
        table
            .try_into()
            .map_err(|e: toml::de::Error| Error::usage(format!("dataset `{text}`: {}", e.message())))
    }
}
