//! Projected stochastic gradient descent over `N` tasks.
//!
//! Each step takes one stochastic gradient step per task,
//! `θ̄_i = θ_i − η_k ∇̂ℓ_i(θ_i)`, then projects `({θ̄_i}, θ_g)` back onto
//! `‖θ_i − θ_g‖ ≤ ε`. The central vector starts at zero and moves only
//! through the projection. With ε = ∞ the projection is skipped and the tasks
//! train independently; ε = 0 goes through the same projection, which then
//! returns the consensus mean.
//!
//! Determinism: each task shuffles its data with its own ChaCha8 stream keyed
//! by `(seed, task_id)`, and the shared initial vector comes from a separate
//! stream. Gradients are computed concurrently across tasks but every
//! reduction happens within a single task, so results do not depend on the
//! thread schedule.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Sample, TaskDataset};
use crate::error::{Error, Result};
use crate::model::{evaluate, loss_and_gradient, Evaluation, LossKind, Model, ModelSpec};
use crate::params::{Centrality, ParamBundle, ParamVector};
use crate::projection::{project, ProjectionSettings};

const INIT_STREAM: u64 = u64::MAX;
const TASK_STREAM_BASE: u64 = 1 << 32;

pub const CHECKPOINT_FORMAT: &str = "crosslearn-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LearningRate {
    Constant { eta: f64 },
    /// `η_k = eta / (1 + decay·k)`.
    InverseDecay { eta: f64, decay: f64 },
}

impl LearningRate {
    pub fn at(&self, step: u64) -> f64 {
        match *self {
            LearningRate::Constant { eta } => eta,
            LearningRate::InverseDecay { eta, decay } => eta / (1.0 + decay * step as f64),
        }
    }

    fn initial(&self) -> f64 {
        match *self {
            LearningRate::Constant { eta } | LearningRate::InverseDecay { eta, .. } => eta,
        }
    }
}

impl Default for LearningRate {
    fn default() -> Self {
        LearningRate::Constant { eta: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub eta: LearningRate,
    pub epochs: usize,
    pub batch_size: usize,
    pub epsilon: Centrality,
    pub projection: ProjectionSettings,
    pub seed: u64,
    /// Project after every `project_every` steps.
    pub project_every: usize,
    /// Defaults to `ceil(max_i M_i / batch_size)`.
    pub steps_per_epoch: Option<usize>,
    /// Rescale any task gradient whose norm exceeds this value.
    pub grad_clip: Option<f64>,
    /// Start each projection from the previous step's multipliers.
    pub warm_start: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            eta: LearningRate::default(),
            epochs: 30,
            batch_size: 1,
            epsilon: Centrality::Infinite,
            projection: ProjectionSettings::default(),
            seed: 0,
            project_every: 1,
            steps_per_epoch: None,
            grad_clip: None,
            warm_start: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let eta = self.eta.initial();
        if !(eta > 0.0) || !eta.is_finite() {
            return Err(Error::invalid(format!("learning rate must be positive, got {eta}")));
        }
        if let LearningRate::InverseDecay { decay, .. } = self.eta {
            if !(decay >= 0.0) {
                return Err(Error::invalid("learning-rate decay must be nonnegative"));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if self.project_every == 0 {
            return Err(Error::invalid("project_every must be at least 1"));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::invalid("steps_per_epoch must be at least 1"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::invalid("gradient clip threshold must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean minibatch loss per task over the epoch.
    pub train_loss: Vec<f64>,
    pub validation: Option<Vec<Evaluation>>,
    /// `max_i ‖θ_i − θ_g‖` at the end of the epoch.
    pub max_deviation: f64,
    /// Largest `max_i ‖θ_i − θ_g‖` seen after any step of the epoch.
    pub peak_deviation: f64,
    pub projection_iterations: usize,
    pub unconverged_projections: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TaskCursor {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl TaskCursor {
    fn new(seed: u64, task_id: usize, len: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(TASK_STREAM_BASE + task_id as u64);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        TaskCursor { rng, order, pos: 0 }
    }

    /// Next `size` indices, reshuffling whenever the pass is exhausted.
    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            batch.push(self.order[self.pos]);
            self.pos += 1;
        }
        batch
    }
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub epoch: usize,
    pub step: u64,
    pub bundle: ParamBundle,
    multipliers: Option<Vec<f64>>,
    cursors: Vec<TaskCursor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: ModelSpec,
    pub loss: LossKind,
    pub config: TrainConfig,
    pub state: TrainerState,
    pub history: Vec<EpochMetrics>,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let cp: Checkpoint = serde_json::from_reader(file)?;
        if cp.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", cp.format)));
        }
        if cp.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "version {} (this build reads {CHECKPOINT_VERSION})",
                cp.version
            )));
        }
        Ok(cp)
    }
}

pub struct Trainer<'a> {
    model_spec: ModelSpec,
    model: Box<dyn Model>,
    loss: LossKind,
    config: TrainConfig,
    train: &'a [TaskDataset],
    validation: Option<&'a [TaskDataset]>,
    steps_per_epoch: usize,
    state: TrainerState,
    history: Vec<EpochMetrics>,
}

impl std::fmt::Debug for Trainer<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trainer")
            .field("model", &self.model_spec)
            .field("loss", &self.loss)
            .field("epoch", &self.state.epoch)
            .finish()
    }
}

impl<'a> Trainer<'a> {
    pub fn new(
        train: &'a [TaskDataset],
        validation: Option<&'a [TaskDataset]>,
        model_spec: ModelSpec,
        loss: LossKind,
        config: TrainConfig,
    ) -> Result<Self> {
        let model = check_inputs(train, validation, &model_spec, &config)?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
        init_rng.set_stream(INIT_STREAM);
        let theta0 = model.init_params(&mut init_rng);
        let tasks = vec![theta0; train.len()];
        let bundle = ParamBundle::new(tasks, ParamVector::zeros(model.param_len()))?;
        let cursors = train
            .iter()
            .map(|d| TaskCursor::new(config.seed, d.task_id, d.len()))
            .collect();
        let steps_per_epoch = resolve_steps(train, &config);
        Ok(Trainer {
            model_spec,
            model,
            loss,
            config,
            train,
            validation,
            steps_per_epoch,
            state: TrainerState {
                epoch: 0,
                step: 0,
                bundle,
                multipliers: None,
                cursors,
            },
            history: Vec::new(),
        })
    }

    pub fn resume(
        checkpoint: Checkpoint,
        train: &'a [TaskDataset],
        validation: Option<&'a [TaskDataset]>,
    ) -> Result<Self> {
        let model = check_inputs(train, validation, &checkpoint.model, &checkpoint.config)?;
        let st = &checkpoint.state;
        if st.bundle.num_tasks() != train.len() || st.bundle.dim() != model.param_len() {
            return Err(Error::Checkpoint("bundle shape does not match data and model".into()));
        }
        if st.cursors.len() != train.len() || st.cursors.iter().zip(train).any(|(c, d)| c.order.len() != d.len()) {
            return Err(Error::Checkpoint("data cursors do not match the datasets".into()));
        }
        let steps_per_epoch = resolve_steps(train, &checkpoint.config);
        Ok(Trainer {
            model_spec: checkpoint.model,
            model,
            loss: checkpoint.loss,
            config: checkpoint.config,
            train,
            validation,
            steps_per_epoch,
            state: checkpoint.state,
            history: checkpoint.history,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            model: self.model_spec,
            loss: self.loss,
            config: self.config.clone(),
            state: self.state.clone(),
            history: self.history.clone(),
        }
    }

    pub fn bundle(&self) -> &ParamBundle {
        &self.state.bundle
    }

    pub fn model(&self) -> &dyn Model {
        self.model.as_ref()
    }

    pub fn history(&self) -> &[EpochMetrics] {
        &self.history
    }

    pub fn epoch(&self) -> usize {
        self.state.epoch
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn is_done(&self) -> bool {
        self.state.epoch >= self.config.epochs
    }

    /// Runs the remaining epochs.
    pub fn run(&mut self) -> Result<()> {
        while !self.is_done() {
            self.run_epoch()?;
        }
        Ok(())
    }

    pub fn run_epoch(&mut self) -> Result<&EpochMetrics> {
        let n = self.train.len();
        let epoch = self.state.epoch;
        let mut loss_sums = vec![0.0; n];
        let mut peak: f64 = 0.0;
        let mut proj_iters = 0;
        let mut unconverged = 0;

        for _ in 0..self.steps_per_epoch {
            let eta = self.config.eta.at(self.state.step);
            let model = self.model.as_ref();
            let loss = &self.loss;
            let batch_size = self.config.batch_size;
            let clip = self.config.grad_clip;
            let results: Vec<Result<(f64, ParamVector)>> = self
                .state
                .cursors
                .par_iter_mut()
                .zip(self.state.bundle.tasks().par_iter())
                .zip(self.train.par_iter())
                .map(|((cursor, theta), data)| {
                    let idx = cursor.next_batch(batch_size);
                    let batch: Vec<&Sample> = idx.iter().map(|&j| &data.samples[j]).collect();
                    let (l, mut g) = loss_and_gradient(model, loss, theta, &batch)?;
                    if let Some(c) = clip {
                        let norm = g.norm();
                        if norm > c {
                            g.as_mut_slice().iter_mut().for_each(|v| *v *= c / norm);
                        }
                    }
                    let stepped: Vec<f64> = theta
                        .as_slice()
                        .iter()
                        .zip(g.as_slice())
                        .map(|(t, gi)| t - eta * gi)
                        .collect();
                    Ok((l, ParamVector::new(stepped)?))
                })
                .collect();

            let mut stepped = Vec::with_capacity(n);
            for (i, r) in results.into_iter().enumerate() {
                match r {
                    Ok((l, theta)) => {
                        loss_sums[i] += l;
                        stepped.push(theta);
                    }
                    Err(Error::NonFinite(_)) => {
                        return Err(Error::Diverged {
                            epoch,
                            task: self.train[i].task_id,
                            loss: f64::NAN,
                        })
                    }
                    Err(e) => return Err(e),
                }
            }
            let mut bundle = ParamBundle::new(stepped, self.state.bundle.central().clone())?;
            self.state.step += 1;

            if let Centrality::Finite(eps) = self.config.epsilon {
                if self.state.step.is_multiple_of(self.config.project_every as u64) {
                    let mut settings = self.config.projection.clone();
                    if self.config.warm_start {
                        if let Some(mu) = &self.state.multipliers {
                            settings.mu_init = Some(mu.clone());
                        }
                    }
                    let out = project(&bundle, eps, &settings)?;
                    proj_iters += out.iterations;
                    if !out.converged {
                        unconverged += 1;
                    }
                    self.state.multipliers = Some(out.state.mu().to_vec());
                    bundle = out.output;
                }
            }
            peak = peak.max(bundle.max_deviation());
            self.state.bundle = bundle;
        }

        let validation = match self.validation {
            Some(val) => Some(
                val.iter()
                    .zip(self.state.bundle.tasks())
                    .map(|(d, theta)| evaluate(self.model.as_ref(), &self.loss, theta, &d.samples))
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => None,
        };
        let steps = self.steps_per_epoch as f64;
        self.history.push(EpochMetrics {
            epoch,
            train_loss: loss_sums.into_iter().map(|s| s / steps).collect(),
            validation,
            max_deviation: self.state.bundle.max_deviation(),
            peak_deviation: peak,
            projection_iterations: proj_iters,
            unconverged_projections: unconverged,
        });
        self.state.epoch += 1;
        Ok(self.history.last().expect("just pushed"))
    }

    pub fn into_outcome(self) -> TrainOutcome {
        TrainOutcome {
            bundle: self.state.bundle,
            history: self.history,
            steps_per_epoch: self.steps_per_epoch,
        }
    }
}

fn resolve_steps(train: &[TaskDataset], config: &TrainConfig) -> usize {
    config.steps_per_epoch.unwrap_or_else(|| {
        let longest = train.iter().map(|d| d.len()).max().unwrap_or(1);
        longest.div_ceil(config.batch_size).max(1)
    })
}

fn check_inputs(
    train: &[TaskDataset],
    validation: Option<&[TaskDataset]>,
    model_spec: &ModelSpec,
    config: &TrainConfig,
) -> Result<Box<dyn Model>> {
    config.validate()?;
    let first = train
        .first()
        .ok_or_else(|| Error::invalid("training needs at least one task"))?;
    for d in train {
        if d.is_empty() {
            return Err(Error::invalid(format!("task {} has no training samples", d.task_id)));
        }
        if d.input_dim != first.input_dim || d.labels != first.labels {
            return Err(Error::invalid(format!(
                "task {} disagrees with task {} on input or label dimensions",
                d.task_id, first.task_id
            )));
        }
    }
    let mut ids: Vec<usize> = train.iter().map(|d| d.task_id).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::invalid("task ids must be distinct"));
    }
    if let Some(val) = validation {
        if val.len() != train.len() || val.iter().zip(train).any(|(v, t)| v.task_id != t.task_id) {
            return Err(Error::invalid("validation sets must pair with training tasks in order"));
        }
        if let Some(v) = val.iter().find(|v| v.is_empty()) {
            return Err(Error::invalid(format!("task {} has an empty validation set", v.task_id)));
        }
    }
    model_spec.build(first.input_dim, first.labels.output_dim())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub bundle: ParamBundle,
    pub history: Vec<EpochMetrics>,
    pub steps_per_epoch: usize,
}

/// Trains one parameter vector per task under the configured centrality.
pub fn train(
    datasets: &[TaskDataset],
    validation: Option<&[TaskDataset]>,
    model_spec: ModelSpec,
    loss: LossKind,
    config: TrainConfig,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(datasets, validation, model_spec, loss, config)?;
    trainer.run()?;
    Ok(trainer.into_outcome())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{LabelKind, Target};

    /// Bias-only regression task whose loss is `(θ − c)²`.
    fn quadratic(task_id: usize, c: f64) -> TaskDataset {
        TaskDataset::new(
            task_id,
            0,
            LabelKind::Regression(1),
            vec![Sample {
                x: vec![],
                y: Target::Values(vec![c]),
            }],
        )
        .unwrap()
    }

    fn quad_config(epsilon: Centrality) -> TrainConfig {
        TrainConfig {
            eta: LearningRate::Constant { eta: 0.05 },
            epochs: 400,
            epsilon,
            ..Default::default()
        }
    }

    fn run_quadratics(epsilon: Centrality) -> ParamBundle {
        let data = vec![quadratic(0, 0.0), quadratic(1, 2.0)];
        train(&data, None, ModelSpec::Linear, LossKind::SquaredError, quad_config(epsilon))
            .unwrap()
            .bundle
    }

    #[test]
    fn inactive_constraint_reaches_task_optima() {
        let b = run_quadratics(Centrality::Finite(1.5));
        assert!((b.task(0)[0] - 0.0).abs() < 1e-3);
        assert!((b.task(1)[0] - 2.0).abs() < 1e-3);
    }

    #[test]
    fn radius_one_leaves_optima_feasible() {
        // θ_g = 1 sits within 1 of both optima, so nothing is pulled together
        let b = run_quadratics(Centrality::Finite(1.0));
        assert!((b.task(0)[0] - 0.0).abs() < 1e-3);
        assert!((b.task(1)[0] - 2.0).abs() < 1e-3);
    }

    #[test]
    fn consensus_converges_to_pooled_minimizer() {
        let b = run_quadratics(Centrality::CONSENSUS);
        for k in 0..=2 {
            assert!((b.gram_vector(k)[0] - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn half_radius_matches_kkt_solution() {
        let b = run_quadratics(Centrality::Finite(0.5));
        assert!((b.task(0)[0] - 0.5).abs() < 1e-2, "{:?}", b);
        assert!((b.task(1)[0] - 1.5).abs() < 1e-2);
        assert!((b.central()[0] - 1.0).abs() < 1e-2);
    }

    #[test]
    fn rejects_bad_inputs() {
        let empty = TaskDataset::new(0, 0, LabelKind::Regression(1), vec![]).unwrap();
        let cfg = quad_config(Centrality::Infinite);
        assert!(train(&[empty], None, ModelSpec::Linear, LossKind::SquaredError, cfg.clone()).is_err());
        assert!(train(&[], None, ModelSpec::Linear, LossKind::SquaredError, cfg.clone()).is_err());
        let mut bad = cfg.clone();
        bad.batch_size = 0;
        assert!(train(&[quadratic(0, 1.0)], None, ModelSpec::Linear, LossKind::SquaredError, bad).is_err());
        let dup = vec![quadratic(0, 1.0), quadratic(0, 2.0)];
        assert!(train(&dup, None, ModelSpec::Linear, LossKind::SquaredError, cfg).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let data = vec![quadratic(0, 1.0)];
        let cfg = TrainConfig {
            eta: LearningRate::Constant { eta: 10.0 },
            epochs: 2000,
            ..Default::default()
        };
        let err = train(&data, None, ModelSpec::Linear, LossKind::SquaredError, cfg).unwrap_err();
        assert!(matches!(err, Error::Diverged { task: 0, .. }), "{err}");
    }

    #[test]
    fn cursor_cycles_all_samples_each_pass() {
        let mut c = TaskCursor::new(1, 0, 5);
        let mut seen = c.next_batch(5);
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        assert_eq!(c.next_batch(7).len(), 7);
    }
}
