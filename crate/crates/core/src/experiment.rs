//! Declarative experiment runs: the two-Gaussian ε sweep, the multi-task ε
//! sweep, single training runs and the projection oracle check.
//!
//! Every run writes its tables as CSV into `out_dir` next to a
//! `resolved_config.json` sidecar holding the full configuration after
//! defaults and overrides, so each file can be traced to the exact inputs.
//! Outputs depend only on the configuration (and its seed), never on thread
//! scheduling.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, load_csv, split, CsvSchema, Standardizer, SyntheticSpec, TaskDataset};
use crate::error::{Error, Result};
use crate::gaussian::{claim2_witness, mse_closed_form, mse_derivative, monte_carlo_mse, GaussianProblem};
use crate::model::{LossKind, ModelSpec};
use crate::params::{feasibility, Centrality, ParamBundle};
use crate::projection::{
    brute_force_project, dual_subgradient, project, projection_objective, ProjectionSettings, BRUTE_FORCE_BUDGET,
};
use crate::trainer::{train, EpochMetrics, TrainConfig};

/// Caps the worker threads used by sweeps.
pub const THREADS_ENV: &str = "CROSSLEARN_THREADS";

pub const CONFIG_SIDECAR: &str = "resolved_config.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    GaussianSweep,
    EpsilonSweep,
    SingleTrain,
    ProjectCheck,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::GaussianSweep, Mode::EpsilonSweep, Mode::SingleTrain, Mode::ProjectCheck];

    pub fn name(&self) -> &'static str {
        match self {
            Mode::GaussianSweep => "gaussian-sweep",
            Mode::EpsilonSweep => "epsilon-sweep",
            Mode::SingleTrain => "single-train",
            Mode::ProjectCheck => "project-check",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaussianSection {
    pub problem: GaussianProblem,
    /// Monte Carlo realizations per grid point; 0 skips the simulation.
    pub trials: u64,
}

impl Default for GaussianSection {
    fn default() -> Self {
        GaussianSection {
            problem: GaussianProblem {
                epsilon0: 2.0,
                sigma: 1.0,
                samples: 1,
            },
            trials: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub path: PathBuf,
    pub schema: CsvSchema,
}

/// Exactly one of `synthetic` and `csv` must be set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub synthetic: Option<SyntheticSpec>,
    pub csv: Option<CsvSource>,
    pub train_fraction: f64,
    /// Standardize features with statistics of the pooled training split.
    pub standardize: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            synthetic: None,
            csv: None,
            train_fraction: 0.8,
            standardize: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectCheckSection {
    pub trials: usize,
    pub max_tasks: usize,
    pub max_dim: usize,
}

impl Default for ProjectCheckSection {
    fn default() -> Self {
        ProjectCheckSection {
            trials: 100,
            max_tasks: 5,
            max_dim: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// The ε grid. Entries are numbers or the strings `"0"` and `"inf"`.
    pub epsilon: Vec<Centrality>,
    /// Independent data draws (and training seeds) averaged per ε.
    pub repeats: usize,
    pub gaussian: GaussianSection,
    pub data: DataSection,
    pub model: ModelSpec,
    pub loss: LossKind,
    pub train: TrainConfig,
    pub project_check: ProjectCheckSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: Mode::default(),
            seed: 0,
            out_dir: PathBuf::from("results"),
            epsilon: Vec::new(),
            repeats: 1,
            gaussian: GaussianSection::default(),
            data: DataSection::default(),
            model: ModelSpec::default(),
            loss: LossKind::default(),
            train: TrainConfig::default(),
            project_check: ProjectCheckSection::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML. Relative data paths are resolved against `base`.
    pub fn from_toml(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let (Some(base), Some(csv)) = (base, cfg.data.csv.as_mut()) {
            if csv.path.is_relative() {
                csv.path = base.join(&csv.path);
            }
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        ExperimentConfig::from_toml(&text, path.parent())
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            Mode::GaussianSweep => {
                self.require_grid()?;
                self.gaussian.problem.validate()?;
                if self.gaussian.problem.epsilon0 < 0.0 {
                    return Err(Error::Config("epsilon0 must be nonnegative".into()));
                }
            }
            Mode::EpsilonSweep => {
                self.require_grid()?;
                self.validate_training()?;
            }
            Mode::SingleTrain => {
                if self.epsilon.len() > 1 {
                    return Err(Error::Config(
                        "single-train takes at most one epsilon; use epsilon-sweep for a grid".into(),
                    ));
                }
                self.validate_training()?;
            }
            Mode::ProjectCheck => {
                let pc = &self.project_check;
                if pc.trials == 0 || pc.max_tasks == 0 || pc.max_dim == 0 {
                    return Err(Error::Config("project_check needs positive trials, max_tasks and max_dim".into()));
                }
                let size = (pc.max_tasks + 1) * pc.max_dim;
                if size > BRUTE_FORCE_BUDGET {
                    return Err(Error::BudgetExceeded {
                        size,
                        budget: BRUTE_FORCE_BUDGET,
                    });
                }
            }
        }
        Ok(())
    }

    fn require_grid(&self) -> Result<()> {
        if self.epsilon.is_empty() {
            return Err(Error::Config("the epsilon grid is empty".into()));
        }
        Ok(())
    }

    fn validate_training(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        let d = &self.data;
        match (&d.synthetic, &d.csv) {
            (Some(spec), None) => spec.validate()?,
            (None, Some(csv)) => {
                if !csv.path.is_file() {
                    return Err(Error::Config(format!("data file {} does not exist", csv.path.display())));
                }
            }
            _ => return Err(Error::Config("set exactly one of [data.synthetic] and [data.csv]".into())),
        }
        if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must lie in (0, 1) so that a test split exists".into()));
        }
        self.train.validate()
    }

    /// Train/test splits for repeat `r`.
    pub fn prepare_data(&self, repeat: usize) -> Result<(Vec<TaskDataset>, Vec<TaskDataset>)> {
        let tasks = match (&self.data.synthetic, &self.data.csv) {
            (Some(spec), None) => {
                let mut spec = spec.clone();
                spec.seed = derive_seed(spec.seed, repeat as u64);
                generate_synthetic(&spec)?.datasets
            }
            (None, Some(csv)) => load_csv(&csv.path, csv.schema)?,
            _ => return Err(Error::Config("set exactly one of [data.synthetic] and [data.csv]".into())),
        };
        let split_seed = derive_seed(self.seed, repeat as u64);
        let mut train_sets = Vec::with_capacity(tasks.len());
        let mut test_sets = Vec::with_capacity(tasks.len());
        for t in &tasks {
            let (a, b) = split(t, self.data.train_fraction, split_seed)?;
            train_sets.push(a);
            test_sets.push(b);
        }
        if self.data.standardize {
            let st = Standardizer::fit(&train_sets)?;
            train_sets.iter_mut().chain(test_sets.iter_mut()).for_each(|d| st.apply(d));
        }
        Ok((train_sets, test_sets))
    }

    fn train_config(&self, epsilon: Centrality, repeat: usize) -> TrainConfig {
        TrainConfig {
            epsilon,
            seed: derive_seed(self.train.seed ^ self.seed, repeat as u64),
            ..self.train.clone()
        }
    }
}

/// Mixes a stream index into a seed (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn with_pool<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
            if n == 0 {
                return Err(Error::Config(format!("{THREADS_ENV} must be at least 1")));
            }
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(e.to_string()))?;
            Ok(pool.install(f))
        }
        Err(_) => Ok(f()),
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush()?;
    Ok(())
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        line: e.position().map_or(0, |p| p.line()),
        message: e.to_string(),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

// ---------------------------------------------------------------- gaussian

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GaussianRow {
    pub epsilon: Centrality,
    pub mse_closed_form: f64,
    pub mse_monte_carlo: Option<f64>,
    pub std_error: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClaimCertificate {
    pub epsilon0: f64,
    pub sigma_m_sq: f64,
    /// `mse(ε₀)/σ_M²`; at most 3/4.
    pub claim1_ratio: f64,
    pub claim1_holds: bool,
    /// `d mse/dε` at ε = 0; negative whenever ε₀ > 0.
    pub derivative_at_zero: f64,
    /// Some ε > 0 with `mse(ε) < mse(0)`.
    pub claim2_witness: Option<f64>,
    pub claim2_holds: bool,
    /// Grid point with the smallest closed-form MSE.
    pub grid_minimizer: Centrality,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GaussianSweep {
    pub rows: Vec<GaussianRow>,
    pub certificate: ClaimCertificate,
}

/// Every grid point reuses the same Monte Carlo draws, so differences between
/// neighbouring points are not swamped by sampling noise.
pub fn run_gaussian_sweep(config: &ExperimentConfig) -> Result<GaussianSweep> {
    config.validate_mode(Mode::GaussianSweep)?;
    let problem = config.gaussian.problem;
    let trials = config.gaussian.trials;
    let rows = with_pool(|| {
        config
            .epsilon
            .par_iter()
            .map(|eps| {
                let e = eps.value();
                let mc = if trials > 0 {
                    Some(monte_carlo_mse(&problem, e, trials, config.seed)?)
                } else {
                    None
                };
                Ok(GaussianRow {
                    epsilon: *eps,
                    mse_closed_form: mse_closed_form(&problem, e),
                    mse_monte_carlo: mc.map(|m| m.mse),
                    std_error: mc.map(|m| m.std_error),
                })
            })
            .collect::<Result<Vec<_>>>()
    })??;

    let s2 = problem.agnostic_mse();
    let ratio = mse_closed_form(&problem, problem.epsilon0) / s2;
    let d0 = mse_derivative(&problem, 0.0);
    let witness = claim2_witness(&problem);
    let grid_minimizer = rows
        .iter()
        .min_by(|a, b| a.mse_closed_form.total_cmp(&b.mse_closed_form))
        .map(|r| r.epsilon)
        .expect("grid is nonempty");
    Ok(GaussianSweep {
        rows,
        certificate: ClaimCertificate {
            epsilon0: problem.epsilon0,
            sigma_m_sq: s2,
            claim1_ratio: ratio,
            claim1_holds: ratio <= 0.75 + 1e-12,
            derivative_at_zero: d0,
            claim2_witness: witness,
            claim2_holds: problem.epsilon0 > 0.0 && d0 < 0.0 && witness.is_some(),
            grid_minimizer,
        },
    })
}

impl GaussianSweep {
    pub const HEADER: [&'static str; 4] = ["epsilon", "mse_closed_form", "mse_monte_carlo", "std_error"];

    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.epsilon.to_string(),
                    fmt_f64(r.mse_closed_form),
                    fmt_opt(r.mse_monte_carlo),
                    fmt_opt(r.std_error),
                ]
            })
            .collect();
        let table = dir.join("gaussian_sweep.csv");
        write_table(&table, &Self::HEADER, &rows)?;
        let cert = dir.join("claim_certificate.json");
        write_json(&cert, &self.certificate)?;
        Ok(vec![table, cert])
    }
}

// ---------------------------------------------------------------- ε sweep

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    Mse,
}

impl Metric {
    pub fn name(&self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::Mse => "mse",
        }
    }

    pub fn higher_is_better(&self) -> bool {
        matches!(self, Metric::Accuracy)
    }

    /// Relative improvement of `value` over `baseline` in percent; positive
    /// means better, whichever direction the metric runs.
    pub fn improvement_pct(&self, value: f64, baseline: f64) -> f64 {
        let diff = if self.higher_is_better() { value - baseline } else { baseline - value };
        100.0 * diff / baseline.abs()
    }

    /// True when `a` is strictly better than `b`.
    pub fn better(&self, a: f64, b: f64) -> bool {
        if self.higher_is_better() {
            a > b
        } else {
            a < b
        }
    }
}

/// One ε of the sweep. `per_task` averages the held-out metric over repeats.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub epsilon: Centrality,
    pub result: std::result::Result<Vec<f64>, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpsilonSweep {
    pub metric: Metric,
    pub task_ids: Vec<usize>,
    /// Training samples per task in repeat 0.
    pub train_sizes: Vec<usize>,
    pub repeats: usize,
    pub points: Vec<SweepPoint>,
}

pub fn run_epsilon_sweep(config: &ExperimentConfig) -> Result<EpsilonSweep> {
    config.validate_mode(Mode::EpsilonSweep)?;
    let splits = (0..config.repeats)
        .map(|r| config.prepare_data(r))
        .collect::<Result<Vec<_>>>()?;
    let metric = if splits[0].0[0].labels.is_classification() {
        Metric::Accuracy
    } else {
        Metric::Mse
    };

    let jobs: Vec<(usize, usize)> = (0..config.epsilon.len())
        .flat_map(|e| (0..config.repeats).map(move |r| (e, r)))
        .collect();
    let outcomes: Vec<std::result::Result<Vec<f64>, String>> = with_pool(|| {
        jobs.par_iter()
            .map(|&(e, r)| {
                let (train_sets, test_sets) = &splits[r];
                let eps = config.epsilon[e];
                held_out(config, train_sets, test_sets, eps, r, metric).map_err(|err| {
                    log::warn!("epsilon {eps}, repeat {r}: {err}");
                    err.to_string()
                })
            })
            .collect()
    })?;

    let n = splits[0].0.len();
    let points = config
        .epsilon
        .iter()
        .enumerate()
        .map(|(e, eps)| {
            let runs = &outcomes[e * config.repeats..(e + 1) * config.repeats];
            let result = match runs.iter().find_map(|r| r.as_ref().err()) {
                Some(err) => Err(err.clone()),
                None => {
                    let mut avg = vec![0.0; n];
                    for run in runs {
                        for (a, v) in avg.iter_mut().zip(run.as_ref().expect("checked")) {
                            *a += v / config.repeats as f64;
                        }
                    }
                    Ok(avg)
                }
            };
            SweepPoint { epsilon: *eps, result }
        })
        .collect();
    Ok(EpsilonSweep {
        metric,
        task_ids: splits[0].0.iter().map(|d| d.task_id).collect(),
        train_sizes: splits[0].0.iter().map(|d| d.len()).collect(),
        repeats: config.repeats,
        points,
    })
}

fn held_out(
    config: &ExperimentConfig,
    train_sets: &[TaskDataset],
    test_sets: &[TaskDataset],
    epsilon: Centrality,
    repeat: usize,
    metric: Metric,
) -> Result<Vec<f64>> {
    let out = train(
        train_sets,
        Some(test_sets),
        config.model,
        config.loss,
        config.train_config(epsilon, repeat),
    )?;
    final_metric(&out.history, metric)
}

fn final_metric(history: &[EpochMetrics], metric: Metric) -> Result<Vec<f64>> {
    let last = history
        .last()
        .and_then(|m| m.validation.as_ref())
        .ok_or_else(|| Error::invalid("training produced no held-out evaluation"))?;
    last.iter()
        .map(|ev| match metric {
            Metric::Accuracy => ev.accuracy,
            Metric::Mse => ev.mse,
        })
        .collect::<Option<Vec<f64>>>()
        .ok_or_else(|| Error::invalid("held-out metric missing"))
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl EpsilonSweep {
    fn baseline(&self, eps: Centrality) -> Option<&[f64]> {
        self.points
            .iter()
            .find(|p| p.epsilon == eps)
            .and_then(|p| p.result.as_deref().ok())
    }

    pub fn agnostic(&self) -> Option<&[f64]> {
        self.baseline(Centrality::Infinite)
    }

    pub fn consensus(&self) -> Option<&[f64]> {
        self.baseline(Centrality::CONSENSUS)
    }

    /// Finite, nonzero ε with the best mean metric, with that mean.
    pub fn best_interior(&self) -> Option<(Centrality, f64)> {
        self.points
            .iter()
            .filter(|p| matches!(p.epsilon, Centrality::Finite(e) if e > 0.0))
            .filter_map(|p| p.result.as_ref().ok().map(|v| (p.epsilon, mean_std(v).0)))
            .fold(None, |best: Option<(Centrality, f64)>, (e, m)| match best {
                Some((_, bm)) if !self.metric.better(m, bm) => best,
                _ => Some((e, m)),
            })
    }

    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let mut header = vec![
            "epsilon".to_string(),
            "status".to_string(),
            "metric".to_string(),
            "mean".to_string(),
            "std".to_string(),
            "min".to_string(),
            "max".to_string(),
        ];
        header.extend(self.task_ids.iter().map(|t| format!("task_{t}")));
        let summary: Vec<Vec<String>> = self
            .points
            .iter()
            .map(|p| {
                let mut row = vec![p.epsilon.to_string()];
                match &p.result {
                    Ok(v) => {
                        let (mean, std) = mean_std(v);
                        let min = v.iter().copied().fold(f64::INFINITY, f64::min);
                        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        row.extend(["ok".into(), self.metric.name().into()]);
                        row.extend([mean, std, min, max].map(fmt_f64));
                        row.extend(v.iter().map(|x| fmt_f64(*x)));
                    }
                    Err(msg) => {
                        row.extend([format!("error: {msg}"), self.metric.name().into()]);
                        row.extend(std::iter::repeat_n(String::new(), 4 + self.task_ids.len()));
                    }
                }
                row
            })
            .collect();
        let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
        let table = dir.join("epsilon_sweep.csv");
        write_table(&table, &header_refs, &summary)?;

        let agnostic = self.agnostic();
        let consensus = self.consensus();
        let mut tasks = Vec::new();
        for p in &self.points {
            let Ok(v) = &p.result else { continue };
            for (k, value) in v.iter().enumerate() {
                tasks.push(vec![
                    p.epsilon.to_string(),
                    self.task_ids[k].to_string(),
                    self.train_sizes[k].to_string(),
                    fmt_f64(*value),
                    fmt_opt(agnostic.map(|b| self.metric.improvement_pct(*value, b[k]))),
                    fmt_opt(consensus.map(|b| self.metric.improvement_pct(*value, b[k]))),
                ]);
            }
        }
        let per_task = dir.join("epsilon_sweep_tasks.csv");
        write_table(
            &per_task,
            &[
                "epsilon",
                "task_id",
                "train_samples",
                self.metric.name(),
                "improvement_vs_agnostic_pct",
                "improvement_vs_consensus_pct",
            ],
            &tasks,
        )?;
        Ok(vec![table, per_task])
    }
}

// ---------------------------------------------------------------- single run

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SingleTrain {
    pub epsilon: Centrality,
    pub task_ids: Vec<usize>,
    pub history: Vec<EpochMetrics>,
    pub bundle: ParamBundle,
}

pub fn run_single_train(config: &ExperimentConfig) -> Result<SingleTrain> {
    config.validate_mode(Mode::SingleTrain)?;
    let epsilon = config.epsilon.first().copied().unwrap_or(config.train.epsilon);
    let (train_sets, test_sets) = config.prepare_data(0)?;
    let out = with_pool(|| {
        train(
            &train_sets,
            Some(&test_sets),
            config.model,
            config.loss,
            config.train_config(epsilon, 0),
        )
    })??;
    Ok(SingleTrain {
        epsilon,
        task_ids: train_sets.iter().map(|d| d.task_id).collect(),
        history: out.history,
        bundle: out.bundle,
    })
}

impl SingleTrain {
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let mut rows = Vec::new();
        for m in &self.history {
            for (k, task) in self.task_ids.iter().enumerate() {
                let val = m.validation.as_ref().map(|v| v[k]);
                rows.push(vec![
                    m.epoch.to_string(),
                    task.to_string(),
                    fmt_f64(m.train_loss[k]),
                    fmt_opt(val.map(|v| v.loss)),
                    fmt_opt(val.and_then(|v| v.accuracy)),
                    fmt_opt(val.and_then(|v| v.mse)),
                    fmt_f64(m.max_deviation),
                    fmt_f64(m.peak_deviation),
                ]);
            }
        }
        let table = dir.join("training_history.csv");
        write_table(
            &table,
            &[
                "epoch",
                "task_id",
                "train_loss",
                "test_loss",
                "test_accuracy",
                "test_mse",
                "max_deviation",
                "peak_deviation",
            ],
            &rows,
        )?;
        let params = dir.join("parameters.json");
        write_json(&params, &self.bundle)?;
        Ok(vec![table, params])
    }
}

// ---------------------------------------------------------------- oracle check

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProjectCheckReport {
    pub trials: usize,
    /// Largest `|f_dual − f_oracle|` of the projection objective.
    pub max_objective_gap: f64,
    /// Largest `max_i ‖θ_i − θ_g‖ − ε` over the dual outputs, floored at 0.
    pub max_violation: f64,
    /// Largest `max_i |μ_i g_i| / (δ + slack·Σμ)`; at most 1 when the
    /// complementary-slackness residual respects its bound.
    pub max_slackness_ratio: f64,
    pub unconverged: usize,
}

pub fn run_project_check(config: &ExperimentConfig) -> Result<ProjectCheckReport> {
    config.validate_mode(Mode::ProjectCheck)?;
    let pc = config.project_check;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let settings = ProjectionSettings::default();
    let mut report = ProjectCheckReport {
        trials: pc.trials,
        max_objective_gap: 0.0,
        max_violation: 0.0,
        max_slackness_ratio: 0.0,
        unconverged: 0,
    };
    for trial in 0..pc.trials {
        let n = rng.random_range(1..=pc.max_tasks);
        let s = rng.random_range(1..=pc.max_dim);
        let scale = rng.random_range(0.1..10.0);
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..s)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    scale * z
                })
                .collect()
        };
        let tasks: Vec<Vec<f64>> = (0..n).map(|_| draw(&mut rng)).collect();
        let central = draw(&mut rng);
        let task_refs: Vec<&[f64]> = tasks.iter().map(Vec::as_slice).collect();
        let input = ParamBundle::from_slices(&task_refs, &central)?;
        let eps = if trial % 10 == 9 { 0.0 } else { scale * rng.random_range(0.0..3.0) };

        let dual = project(&input, eps, &settings)?;
        let oracle = brute_force_project(&input, eps)?;
        let gap = (projection_objective(&dual.output, &input)? - projection_objective(&oracle, &input)?).abs();
        let violation = feasibility(&dual.output, Centrality::Finite(eps)).worst_violation.max(0.0);

        let g = dual_subgradient(&dual.state, eps);
        let mu = dual.state.mu();
        let delta = settings.resolved_delta(dual.state.gram());
        let bound = delta + settings.squared_slack(eps) * mu.iter().sum::<f64>();
        let residual = mu.iter().zip(&g).map(|(m, gi)| (m * gi).abs()).fold(0.0, f64::max);
        let ratio = if dual.converged && !mu.iter().any(|m| !m.is_finite()) { residual / bound } else { f64::INFINITY };

        report.max_objective_gap = report.max_objective_gap.max(gap);
        report.max_violation = report.max_violation.max(violation);
        if eps > 0.0 {
            report.max_slackness_ratio = report.max_slackness_ratio.max(ratio);
        }
        if !dual.converged {
            report.unconverged += 1;
        }
    }
    Ok(report)
}

impl ProjectCheckReport {
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let path = dir.join("project_check.json");
        write_json(&path, self)?;
        Ok(vec![path])
    }
}

// ---------------------------------------------------------------- dispatch

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum RunOutput {
    GaussianSweep(GaussianSweep),
    EpsilonSweep(EpsilonSweep),
    SingleTrain(SingleTrain),
    ProjectCheck(ProjectCheckReport),
}

impl ExperimentConfig {
    fn validate_mode(&self, mode: Mode) -> Result<()> {
        if self.mode != mode {
            return Err(Error::Config(format!("config mode is {}, not {mode}", self.mode)));
        }
        self.validate()
    }
}

/// Runs the configured mode and writes its outputs plus the config sidecar.
/// Returns the result together with the files written.
pub fn run(config: &ExperimentConfig) -> Result<(RunOutput, Vec<PathBuf>)> {
    config.validate()?;
    std::fs::create_dir_all(&config.out_dir)?;
    let sidecar = config.out_dir.join(CONFIG_SIDECAR);
    write_json(&sidecar, config)?;
    let dir = config.out_dir.as_path();
    let (output, mut files) = match config.mode {
        Mode::GaussianSweep => {
            let r = run_gaussian_sweep(config)?;
            let f = r.write(dir)?;
            (RunOutput::GaussianSweep(r), f)
        }
        Mode::EpsilonSweep => {
            let r = run_epsilon_sweep(config)?;
            let f = r.write(dir)?;
            (RunOutput::EpsilonSweep(r), f)
        }
        Mode::SingleTrain => {
            let r = run_single_train(config)?;
            let f = r.write(dir)?;
            (RunOutput::SingleTrain(r), f)
        }
        Mode::ProjectCheck => {
            let r = run_project_check(config)?;
            let f = r.write(dir)?;
            (RunOutput::ProjectCheck(r), f)
        }
    };
    files.push(sidecar);
    Ok((output, files))
}
