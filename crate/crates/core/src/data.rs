//! Per-task supervised datasets: synthetic multi-domain generation, CSV
//! ingestion, and stratified train/test splitting.
//!
//! CSV layout (UTF-8, comma separated, `.` decimal point, header required):
//!
//! ```text
//! task_id,label,x0,x1,...,x{P-1}
//! 0,2,0.13,-1.4,...
//! ```
//!
//! `label` is a class index for classification and a real number for
//! regression.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LinearModel, Model};
use crate::params::ParamVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Target {
    Class(usize),
    Values(Vec<f64>),
}

impl Target {
    /// Component `q` of the target as a vector (one-hot for a class).
    pub fn component(&self, q: usize) -> f64 {
        match self {
            Target::Class(c) => {
                if *c == q {
                    1.0
                } else {
                    0.0
                }
            }
            Target::Values(v) => v[q],
        }
    }

    pub fn class(&self) -> Option<usize> {
        match self {
            Target::Class(c) => Some(*c),
            Target::Values(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "dim", rename_all = "snake_case")]
pub enum LabelKind {
    /// Class indices in `[0, Q)`.
    Classes(usize),
    /// Real targets of dimension `Q`.
    Regression(usize),
}

impl LabelKind {
    pub fn output_dim(&self) -> usize {
        match *self {
            LabelKind::Classes(q) | LabelKind::Regression(q) => q,
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, LabelKind::Classes(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub task_id: usize,
    pub input_dim: usize,
    pub labels: LabelKind,
    pub samples: Vec<Sample>,
}

impl TaskDataset {
    pub fn new(task_id: usize, input_dim: usize, labels: LabelKind, samples: Vec<Sample>) -> Result<Self> {
        let d = TaskDataset {
            task_id,
            input_dim,
            labels,
            samples,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.output_dim() == 0 {
            return Err(Error::invalid("label dimension must be positive"));
        }
        for (j, s) in self.samples.iter().enumerate() {
            if s.x.len() != self.input_dim {
                return Err(Error::DimensionMismatch {
                    context: "sample features",
                    expected: self.input_dim,
                    found: s.x.len(),
                });
            }
            if s.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("sample features"));
            }
            match (&s.y, self.labels) {
                (Target::Class(c), LabelKind::Classes(q)) if *c < q => {}
                (Target::Values(v), LabelKind::Regression(q)) if v.len() == q && v.iter().all(|x| x.is_finite()) => {}
                _ => {
                    return Err(Error::invalid(format!(
                        "task {}: sample {j} has a label inconsistent with {:?}",
                        self.task_id, self.labels
                    )))
                }
            }
        }
        Ok(())
    }

    fn with_samples(&self, samples: Vec<Sample>) -> TaskDataset {
        TaskDataset {
            task_id: self.task_id,
            input_dim: self.input_dim,
            labels: self.labels,
            samples,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    #[default]
    Regression,
    Classification,
}

/// Multi-task generator: a shared linear ground truth `θ*` and per-task
/// `θ_i* = θ* + ρ·u_i` with `u_i` a random unit direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub input_dim: usize,
    /// Classes for classification, target dimension for regression.
    #[serde(default = "one")]
    pub outputs: usize,
    /// ρ: distance of each task's ground truth from the shared one.
    pub relatedness: f64,
    /// Standard deviation of the entries of `θ*`.
    #[serde(default = "one_f")]
    pub signal: f64,
    /// `M_i`, one entry per task.
    pub samples_per_task: Vec<usize>,
    /// Flip-to-uniform rate for classification, noise std for regression.
    #[serde(default)]
    pub label_noise: f64,
    pub seed: u64,
}

fn one() -> usize {
    1
}

fn one_f() -> f64 {
    1.0
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_task.is_empty() {
            return Err(Error::invalid("synthetic spec needs at least one task"));
        }
        if self.samples_per_task.contains(&0) {
            return Err(Error::invalid("every task needs at least one sample"));
        }
        if self.outputs == 0 {
            return Err(Error::invalid("output dimension must be positive"));
        }
        if self.kind == SyntheticKind::Classification && self.outputs < 2 {
            return Err(Error::invalid("classification needs at least two classes"));
        }
        if !(self.relatedness >= 0.0) || !(self.signal >= 0.0) || !(self.label_noise >= 0.0) {
            return Err(Error::invalid("relatedness, signal and noise must be nonnegative"));
        }
        if self.kind == SyntheticKind::Classification && self.label_noise > 1.0 {
            return Err(Error::invalid("label flip rate must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn labels(&self) -> LabelKind {
        match self.kind {
            SyntheticKind::Regression => LabelKind::Regression(self.outputs),
            SyntheticKind::Classification => LabelKind::Classes(self.outputs),
        }
    }

    /// The model family the labels are drawn from.
    pub fn generating_model(&self) -> LinearModel {
        LinearModel::new(self.input_dim, self.outputs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTasks {
    pub datasets: Vec<TaskDataset>,
    pub shared: ParamVector,
    /// `θ_i*` in [`LinearModel`] layout.
    pub ground_truth: Vec<ParamVector>,
}

/// Draws the shared parameters from ChaCha8 stream 0 of `seed` and task `i`
/// (directions and samples) from stream `i + 1`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticTasks> {
    spec.validate()?;
    let model = spec.generating_model();
    let s = model.param_len();

    let mut shared_rng = stream(spec.seed, 0);
    let shared: Vec<f64> = (0..s).map(|_| spec.signal * normal(&mut shared_rng)).collect();

    let mut datasets = Vec::with_capacity(spec.samples_per_task.len());
    let mut truths = Vec::with_capacity(spec.samples_per_task.len());
    for (i, &m) in spec.samples_per_task.iter().enumerate() {
        let mut rng = stream(spec.seed, i as u64 + 1);
        let dir = unit_direction(&mut rng, s);
        let truth: Vec<f64> = shared.iter().zip(&dir).map(|(a, u)| a + spec.relatedness * u).collect();

        let mut samples = Vec::with_capacity(m);
        for _ in 0..m {
            let x: Vec<f64> = (0..spec.input_dim).map(|_| normal(&mut rng)).collect();
            let out = model.forward(&truth, &x);
            let y = match spec.kind {
                SyntheticKind::Regression => {
                    Target::Values(out.iter().map(|v| v + spec.label_noise * normal(&mut rng)).collect())
                }
                SyntheticKind::Classification => {
                    let class = sample_softmax(&mut rng, &out);
                    if rng.random::<f64>() < spec.label_noise {
                        Target::Class(rng.random_range(0..spec.outputs))
                    } else {
                        Target::Class(class)
                    }
                }
            };
            samples.push(Sample { x, y });
        }
        datasets.push(TaskDataset::new(i, spec.input_dim, spec.labels(), samples)?);
        truths.push(ParamVector::new(truth)?);
    }
    Ok(SyntheticTasks {
        datasets,
        shared: ParamVector::new(shared)?,
        ground_truth: truths,
    })
}

fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn unit_direction(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn sample_softmax(rng: &mut impl Rng, logits: &[f64]) -> usize {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (k, w) in weights.iter().enumerate() {
        if u < *w {
            return k;
        }
        u -= w;
    }
    logits.len() - 1
}

/// Random partition into `(train, test)`, stratified by class for
/// classification data. Per class, the train count is the floor or ceiling of
/// its share, with the total equal to `round(M · train_fraction)`.
pub fn split(dataset: &TaskDataset, train_fraction: f64, seed: u64) -> Result<(TaskDataset, TaskDataset)> {
    if !(train_fraction > 0.0 && train_fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "train fraction must lie in (0, 1], got {train_fraction}"
        )));
    }
    let n = dataset.len();
    if n == 0 {
        return Err(Error::invalid(format!("task {} has no samples", dataset.task_id)));
    }
    if train_fraction == 1.0 {
        log::warn!("task {}: train fraction 1.0 leaves the test split empty", dataset.task_id);
        return Ok((dataset.clone(), dataset.with_samples(Vec::new())));
    }
    let n_train = (n as f64 * train_fraction).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::invalid(format!(
            "task {}: {n} samples at fraction {train_fraction} leave an empty split",
            dataset.task_id
        )));
    }

    // strata: class index, or a single stratum for regression
    let mut strata: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (j, s) in dataset.samples.iter().enumerate() {
        strata.entry(s.y.class().unwrap_or(0)).or_default().push(j);
    }
    let mut quotas: Vec<(usize, usize, f64)> = strata
        .iter()
        .map(|(&c, idx)| {
            let exact = idx.len() as f64 * train_fraction;
            (c, exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let assigned: usize = quotas.iter().map(|q| q.1).sum();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| quotas[b].2.total_cmp(&quotas[a].2).then(a.cmp(&b)));
    for &k in order.iter().take(n_train.saturating_sub(assigned)) {
        quotas[k].1 += 1;
    }

    let mut rng = stream(seed, dataset.task_id as u64);
    let mut in_train = vec![false; n];
    for (c, take, _) in quotas {
        let mut idx = strata[&c].clone();
        idx.shuffle(&mut rng);
        for &j in idx.iter().take(take) {
            in_train[j] = true;
        }
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (j, s) in dataset.samples.iter().enumerate() {
        if in_train[j] {
            train.push(s.clone());
        } else {
            test.push(s.clone());
        }
    }
    Ok((dataset.with_samples(train), dataset.with_samples(test)))
}

/// Per-feature standardization fitted on one set of tasks and applied to others.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(datasets: &[TaskDataset]) -> Result<Self> {
        let p = datasets.first().map(|d| d.input_dim).unwrap_or(0);
        let n: usize = datasets.iter().map(|d| d.len()).sum();
        if n == 0 {
            return Err(Error::invalid("cannot standardize without samples"));
        }
        let mut mean = vec![0.0; p];
        for s in datasets.iter().flat_map(|d| &d.samples) {
            for (m, x) in mean.iter_mut().zip(&s.x) {
                *m += x / n as f64;
            }
        }
        let mut var = vec![0.0; p];
        for s in datasets.iter().flat_map(|d| &d.samples) {
            for ((v, x), m) in var.iter_mut().zip(&s.x).zip(&mean) {
                *v += (x - m) * (x - m) / n as f64;
            }
        }
        let std = var.into_iter().map(|v| if v > 0.0 { v.sqrt() } else { 1.0 }).collect();
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, dataset: &mut TaskDataset) {
        for s in &mut dataset.samples {
            for ((x, m), sd) in s.x.iter_mut().zip(&self.mean).zip(&self.std) {
                *x = (*x - m) / sd;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CsvSchema {
    /// Integer labels; the class count is inferred from the file when absent.
    Classification { classes: Option<usize> },
    Regression,
}

/// Reads every task in a CSV file, ordered by `task_id`.
pub fn load_csv(path: impl AsRef<Path>, schema: CsvSchema) -> Result<Vec<TaskDataset>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    read_csv(file, path, schema)
}

/// Like [`load_csv`] but for a file holding exactly one task.
pub fn load_task_csv(path: impl AsRef<Path>, schema: CsvSchema) -> Result<TaskDataset> {
    let path = path.as_ref();
    let mut tasks = load_csv(path, schema)?;
    match tasks.len() {
        1 => Ok(tasks.pop().expect("one task")),
        k => Err(Error::Csv {
            path: path.to_path_buf(),
            line: 1,
            message: format!("expected a single task, found {k}"),
        }),
    }
}

pub fn read_csv(reader: impl std::io::Read, path: &Path, schema: CsvSchema) -> Result<Vec<TaskDataset>> {
    let fail = |line: u64, message: String| Error::Csv {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers().map_err(|e| fail(1, e.to_string()))?.clone();
    if headers.len() < 2 || headers.get(0).map(str::trim) != Some("task_id") || headers.get(1).map(str::trim) != Some("label") {
        return Err(fail(1, "header must start with task_id,label".into()));
    }
    let p = headers.len() - 2;

    let mut by_task: BTreeMap<usize, Vec<Sample>> = BTreeMap::new();
    let mut max_class = 0usize;
    let mut record = csv::StringRecord::new();
    loop {
        let more = rdr.read_record(&mut record).map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            fail(line, e.to_string())
        })?;
        if !more {
            break;
        }
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != p + 2 {
            return Err(fail(line, format!("expected {} fields, found {}", p + 2, record.len())));
        }
        let task: usize = record[0]
            .trim()
            .parse()
            .map_err(|_| fail(line, format!("invalid task_id {:?}", &record[0])))?;
        let label = record[1].trim();
        let y = match schema {
            CsvSchema::Classification { classes } => {
                let c: usize = label
                    .parse()
                    .map_err(|_| fail(line, format!("invalid class label {label:?}")))?;
                if let Some(q) = classes {
                    if c >= q {
                        return Err(fail(line, format!("unknown label {c} (declared {q} classes)")));
                    }
                }
                max_class = max_class.max(c);
                Target::Class(c)
            }
            CsvSchema::Regression => {
                let v: f64 = label
                    .parse()
                    .map_err(|_| fail(line, format!("invalid numeric label {label:?}")))?;
                if !v.is_finite() {
                    return Err(fail(line, "non-finite label".into()));
                }
                Target::Values(vec![v])
            }
        };
        let mut x = Vec::with_capacity(p);
        for (k, field) in record.iter().skip(2).enumerate() {
            let field = field.trim();
            if field.is_empty() {
                return Err(fail(line, format!("missing feature x{k}")));
            }
            let v: f64 = field
                .parse()
                .map_err(|_| fail(line, format!("invalid feature x{k} {field:?}")))?;
            if !v.is_finite() {
                return Err(fail(line, format!("non-finite feature x{k}")));
            }
            x.push(v);
        }
        by_task.entry(task).or_default().push(Sample { x, y });
    }
    if by_task.is_empty() {
        return Err(fail(1, "file has no data rows".into()));
    }
    let labels = match schema {
        CsvSchema::Classification { classes } => LabelKind::Classes(classes.unwrap_or(max_class + 1)),
        CsvSchema::Regression => LabelKind::Regression(1),
    };
    by_task
        .into_iter()
        .map(|(task, samples)| TaskDataset::new(task, p, labels, samples))
        .collect()
}

pub fn write_csv(path: impl AsRef<Path>, datasets: &[TaskDataset]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_csv_to(file, datasets)
}

pub fn write_csv_to(writer: impl std::io::Write, datasets: &[TaskDataset]) -> Result<()> {
    let p = datasets.first().map(|d| d.input_dim).unwrap_or(0);
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["task_id".to_string(), "label".to_string()];
    header.extend((0..p).map(|k| format!("x{k}")));
    w.write_record(&header).map_err(csv_io)?;
    for d in datasets {
        if d.input_dim != p {
            return Err(Error::DimensionMismatch {
                context: "tasks written to one CSV",
                expected: p,
                found: d.input_dim,
            });
        }
        for s in &d.samples {
            let label = match &s.y {
                Target::Class(c) => c.to_string(),
                Target::Values(v) if v.len() == 1 => v[0].to_string(),
                Target::Values(_) => {
                    return Err(Error::invalid("CSV holds a single label column; multi-output regression is not representable"))
                }
            };
            let mut row = vec![d.task_id.to_string(), label];
            row.extend(s.x.iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(csv_io)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}
