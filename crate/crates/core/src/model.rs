//! Predictors `f(x, θ)` with flattened parameter vectors, losses, and exact
//! parameter gradients by backpropagation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Sample, Target};
use crate::error::{Error, Result};
use crate::params::ParamVector;

pub trait Model: Send + Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    /// Length `S` of the flattened parameter vector.
    fn param_len(&self) -> usize;
    fn forward(&self, theta: &[f64], x: &[f64]) -> Vec<f64>;
    /// Adds `∂⟨grad_output, f(x, θ)⟩/∂θ` into `grad_theta`.
    fn backward(&self, theta: &[f64], x: &[f64], grad_output: &[f64], grad_theta: &mut [f64]);
    fn init_params(&self, rng: &mut dyn rand::RngCore) -> ParamVector;
}

/// Affine map `x ↦ W x + b` with `W ∈ ℝ^{Q×P}`; parameters are stored row by
/// row as `[W_q·, b_q]`, so `S = Q(P + 1)`. `P = 0` gives a bias-only model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearModel {
    pub inputs: usize,
    pub outputs: usize,
}

impl LinearModel {
    pub fn new(inputs: usize, outputs: usize) -> Self {
        assert!(outputs > 0, "a model needs at least one output");
        LinearModel { inputs, outputs }
    }
}

impl Model for LinearModel {
    fn input_dim(&self) -> usize {
        self.inputs
    }

    fn output_dim(&self) -> usize {
        self.outputs
    }

    fn param_len(&self) -> usize {
        self.outputs * (self.inputs + 1)
    }

    fn forward(&self, theta: &[f64], x: &[f64]) -> Vec<f64> {
        let stride = self.inputs + 1;
        theta
            .chunks_exact(stride)
            .map(|row| row[self.inputs] + row[..self.inputs].iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>())
            .collect()
    }

    fn backward(&self, _theta: &[f64], x: &[f64], grad_output: &[f64], grad_theta: &mut [f64]) {
        let stride = self.inputs + 1;
        for (row, &go) in grad_theta.chunks_exact_mut(stride).zip(grad_output) {
            for (g, xi) in row[..self.inputs].iter_mut().zip(x) {
                *g += go * xi;
            }
            row[self.inputs] += go;
        }
    }

    /// Zeros.
    fn init_params(&self, _rng: &mut dyn rand::RngCore) -> ParamVector {
        ParamVector::zeros(self.param_len())
    }
}

/// One hidden layer of width `H` with `tanh`, then an affine output layer.
/// Layout: hidden rows `[W1_h·, b1_h]` (`H(P+1)` entries), then output rows
/// `[W2_q·, b2_q]` (`Q(H+1)` entries).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlpModel {
    pub inputs: usize,
    pub hidden: usize,
    pub outputs: usize,
}

impl MlpModel {
    pub fn new(inputs: usize, hidden: usize, outputs: usize) -> Self {
        assert!(hidden > 0 && outputs > 0, "layer widths must be positive");
        MlpModel {
            inputs,
            hidden,
            outputs,
        }
    }

    fn split<'a>(&self, theta: &'a [f64]) -> (&'a [f64], &'a [f64]) {
        theta.split_at(self.hidden * (self.inputs + 1))
    }

    fn hidden_activations(&self, first: &[f64], x: &[f64]) -> Vec<f64> {
        first
            .chunks_exact(self.inputs + 1)
            .map(|row| {
                let z = row[self.inputs] + row[..self.inputs].iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>();
                z.tanh()
            })
            .collect()
    }
}

impl Model for MlpModel {
    fn input_dim(&self) -> usize {
        self.inputs
    }

    fn output_dim(&self) -> usize {
        self.outputs
    }

    fn param_len(&self) -> usize {
        self.hidden * (self.inputs + 1) + self.outputs * (self.hidden + 1)
    }

    fn forward(&self, theta: &[f64], x: &[f64]) -> Vec<f64> {
        let (first, second) = self.split(theta);
        let h = self.hidden_activations(first, x);
        LinearModel::new(self.hidden, self.outputs).forward(second, &h)
    }

    fn backward(&self, theta: &[f64], x: &[f64], grad_output: &[f64], grad_theta: &mut [f64]) {
        let (first, second) = self.split(theta);
        let h = self.hidden_activations(first, x);
        let (g_first, g_second) = grad_theta.split_at_mut(first.len());
        LinearModel::new(self.hidden, self.outputs).backward(second, &h, grad_output, g_second);

        let stride2 = self.hidden + 1;
        for (j, hj) in h.iter().enumerate() {
            let back: f64 = grad_output
                .iter()
                .enumerate()
                .map(|(q, go)| go * second[q * stride2 + j])
                .sum();
            let dz = back * (1.0 - hj * hj);
            let row = &mut g_first[j * (self.inputs + 1)..(j + 1) * (self.inputs + 1)];
            for (g, xi) in row[..self.inputs].iter_mut().zip(x) {
                *g += dz * xi;
            }
            row[self.inputs] += dz;
        }
    }

    /// Weights uniform in `±1/√fan_in` per layer, biases zero.
    fn init_params(&self, rng: &mut dyn rand::RngCore) -> ParamVector {
        let mut theta = Vec::with_capacity(self.param_len());
        for (fan_in, rows) in [(self.inputs, self.hidden), (self.hidden, self.outputs)] {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            for _ in 0..rows {
                for _ in 0..fan_in {
                    theta.push(rng.random_range(-bound..=bound));
                }
                theta.push(0.0);
            }
        }
        ParamVector::from_raw(theta)
    }
}

/// Architecture descriptor, resolved against data dimensions by [`ModelSpec::build`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    #[default]
    Linear,
    Mlp {
        #[serde(default = "default_hidden")]
        hidden: usize,
    },
}

fn default_hidden() -> usize {
    64
}


impl ModelSpec {
    pub fn build(&self, inputs: usize, outputs: usize) -> Result<Box<dyn Model>> {
        if outputs == 0 {
            return Err(Error::invalid("model output dimension must be positive"));
        }
        Ok(match *self {
            ModelSpec::Linear => Box::new(LinearModel::new(inputs, outputs)),
            ModelSpec::Mlp { hidden } => {
                if hidden == 0 {
                    return Err(Error::invalid("hidden width must be positive"));
                }
                Box::new(MlpModel::new(inputs, hidden, outputs))
            }
        })
    }
}

pub trait Loss: Send + Sync {
    /// Loss value; writes `∂ℓ/∂ŷ` into `grad`.
    fn value_and_grad(&self, output: &[f64], target: &Target, grad: &mut [f64]) -> Result<f64>;

    fn value(&self, output: &[f64], target: &Target) -> Result<f64> {
        let mut scratch = vec![0.0; output.len()];
        self.value_and_grad(output, target, &mut scratch)
    }
}

/// `Σ_q (ŷ_q − y_q)²`. A class target is read as a one-hot vector.
#[derive(Debug, Clone, Copy, Default)]
pub struct SquaredError;

/// Softmax cross-entropy over `Q` logits, computed through log-sum-exp.
/// A vector target is read as a probability distribution over classes.
#[derive(Debug, Clone, Copy, Default)]
pub struct CrossEntropy;

fn target_len_check(output: &[f64], target: &Target) -> Result<()> {
    match target {
        Target::Class(c) if *c >= output.len() => Err(Error::invalid(format!(
            "class {c} out of range for {} outputs",
            output.len()
        ))),
        Target::Values(v) if v.len() != output.len() => Err(Error::DimensionMismatch {
            context: "target vs model output",
            expected: output.len(),
            found: v.len(),
        }),
        _ => Ok(()),
    }
}

impl Loss for SquaredError {
    fn value_and_grad(&self, output: &[f64], target: &Target, grad: &mut [f64]) -> Result<f64> {
        target_len_check(output, target)?;
        let mut total = 0.0;
        for (q, (&y_hat, g)) in output.iter().zip(grad.iter_mut()).enumerate() {
            let y = target.component(q);
            let r = y_hat - y;
            total += r * r;
            *g = 2.0 * r;
        }
        Ok(total)
    }
}

impl Loss for CrossEntropy {
    fn value_and_grad(&self, output: &[f64], target: &Target, grad: &mut [f64]) -> Result<f64> {
        target_len_check(output, target)?;
        let max = output.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = output.iter().map(|z| (z - max).exp()).sum();
        let lse = max + sum_exp.ln();
        let mut total = 0.0;
        for (q, (&z, g)) in output.iter().zip(grad.iter_mut()).enumerate() {
            let p = (z - lse).exp();
            let y = target.component(q);
            total += y * (lse - z);
            *g = p - y;
        }
        Ok(total)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    SquaredError,
    CrossEntropy,
}

impl Loss for LossKind {
    fn value_and_grad(&self, output: &[f64], target: &Target, grad: &mut [f64]) -> Result<f64> {
        match self {
            LossKind::SquaredError => SquaredError.value_and_grad(output, target, grad),
            LossKind::CrossEntropy => CrossEntropy.value_and_grad(output, target, grad),
        }
    }
}

fn check_sample(model: &dyn Model, sample: &Sample) -> Result<()> {
    if sample.x.len() != model.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "sample features vs model input",
            expected: model.input_dim(),
            found: sample.x.len(),
        });
    }
    Ok(())
}

/// Batch-averaged loss and `∇_θ` of it.
pub fn loss_and_gradient(
    model: &dyn Model,
    loss: &dyn Loss,
    theta: &ParamVector,
    batch: &[&Sample],
) -> Result<(f64, ParamVector)> {
    if batch.is_empty() {
        return Err(Error::invalid("gradient batch is empty"));
    }
    if theta.len() != model.param_len() {
        return Err(Error::DimensionMismatch {
            context: "parameters vs model",
            expected: model.param_len(),
            found: theta.len(),
        });
    }
    let mut grad = vec![0.0; theta.len()];
    let mut grad_out = vec![0.0; model.output_dim()];
    let mut total = 0.0;
    for sample in batch {
        check_sample(model, sample)?;
        let out = model.forward(theta.as_slice(), &sample.x);
        let l = loss.value_and_grad(&out, &sample.y, &mut grad_out)?;
        if !l.is_finite() {
            return Err(Error::NonFinite("loss"));
        }
        total += l;
        model.backward(theta.as_slice(), &sample.x, &grad_out, &mut grad);
    }
    let scale = 1.0 / batch.len() as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    Ok((total * scale, ParamVector::from_raw(grad)))
}

/// Average over the batch of `∇_θ ℓ(y, f(x, θ))`.
pub fn stochastic_gradient(
    model: &dyn Model,
    loss: &dyn Loss,
    theta: &ParamVector,
    batch: &[&Sample],
) -> Result<ParamVector> {
    loss_and_gradient(model, loss, theta, batch).map(|(_, g)| g)
}

/// Held-out quality of one parameter vector on a sample set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    /// Fraction of argmax hits, for class targets.
    pub accuracy: Option<f64>,
    /// Mean over samples of `Σ_q (ŷ_q − y_q)² / Q`, for vector targets.
    pub mse: Option<f64>,
}

pub fn evaluate(model: &dyn Model, loss: &dyn Loss, theta: &ParamVector, samples: &[Sample]) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty sample set"));
    }
    let mut total_loss = 0.0;
    let mut hits = 0usize;
    let mut sq = 0.0;
    let mut classes = 0usize;
    for s in samples {
        check_sample(model, s)?;
        let out = model.forward(theta.as_slice(), &s.x);
        total_loss += loss.value(&out, &s.y)?;
        match &s.y {
            Target::Class(c) => {
                classes += 1;
                if argmax(&out) == *c {
                    hits += 1;
                }
            }
            Target::Values(v) => {
                sq += out.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / v.len() as f64;
            }
        }
    }
    let n = samples.len() as f64;
    let regression = samples.len() - classes;
    Ok(Evaluation {
        loss: total_loss / n,
        accuracy: (classes > 0).then(|| hits as f64 / classes as f64),
        mse: (regression > 0).then(|| sq / regression as f64),
    })
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(x: &[f64], y: Target) -> Sample {
        Sample { x: x.to_vec(), y }
    }

    #[test]
    fn linear_layout_and_forward() {
        let m = LinearModel::new(2, 2);
        assert_eq!(m.param_len(), 6);
        // rows: [1, 2 | 3], [-1, 0 | 0.5]
        let theta = [1.0, 2.0, 3.0, -1.0, 0.0, 0.5];
        assert_eq!(m.forward(&theta, &[1.0, 1.0]), vec![6.0, -0.5]);
    }

    #[test]
    fn bias_only_model_is_a_scalar_quadratic() {
        let m = LinearModel::new(0, 1);
        let theta = ParamVector::new(vec![0.5]).unwrap();
        let s = sample(&[], Target::Values(vec![2.0]));
        let (l, g) = loss_and_gradient(&m, &SquaredError, &theta, &[&s]).unwrap();
        assert_eq!(l, 2.25);
        assert_eq!(g.as_slice(), &[-3.0]);
    }

    #[test]
    fn gradient_vanishes_at_least_squares_optimum() {
        // y = 2x - 1 exactly on three points
        let m = LinearModel::new(1, 1);
        let data: Vec<Sample> = [0.0, 1.0, 3.0]
            .iter()
            .map(|&x| sample(&[x], Target::Values(vec![2.0 * x - 1.0])))
            .collect();
        let batch: Vec<&Sample> = data.iter().collect();
        let theta = ParamVector::new(vec![2.0, -1.0]).unwrap();
        let g = stochastic_gradient(&m, &SquaredError, &theta, &batch).unwrap();
        assert!(g.norm() <= 1e-8);
    }

    #[test]
    fn duplicated_batch_same_gradient() {
        let m = MlpModel::new(3, 5, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let theta = m.init_params(&mut rng);
        let s = sample(&[0.3, -1.0, 2.0], Target::Class(1));
        let one = stochastic_gradient(&m, &CrossEntropy, &theta, &[&s]).unwrap();
        let two = stochastic_gradient(&m, &CrossEntropy, &theta, &[&s, &s]).unwrap();
        for (a, b) in one.as_slice().iter().zip(two.as_slice()) {
            assert!((a - b).abs() <= 1e-15 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn cross_entropy_is_stable_for_large_logits() {
        let mut g = vec![0.0; 3];
        let l = CrossEntropy
            .value_and_grad(&[1000.0, 0.0, -1000.0], &Target::Class(0), &mut g)
            .unwrap();
        assert!(l.abs() < 1e-12);
        let l = CrossEntropy
            .value_and_grad(&[1000.0, 0.0, -1000.0], &Target::Class(2), &mut g)
            .unwrap();
        assert!((l - 2000.0).abs() < 1e-9);
        assert!(g.iter().all(|v| v.is_finite()));
        assert!(l >= 0.0);
    }

    #[test]
    fn errors_surface() {
        let m = LinearModel::new(2, 2);
        let theta = ParamVector::zeros(6);
        assert!(stochastic_gradient(&m, &SquaredError, &theta, &[]).is_err());
        let bad_x = sample(&[1.0], Target::Class(0));
        assert!(stochastic_gradient(&m, &SquaredError, &theta, &[&bad_x]).is_err());
        let bad_y = sample(&[1.0, 2.0], Target::Class(5));
        assert!(stochastic_gradient(&m, &CrossEntropy, &theta, &[&bad_y]).is_err());
        let wrong_theta = ParamVector::zeros(5);
        let ok = sample(&[1.0, 2.0], Target::Class(0));
        assert!(stochastic_gradient(&m, &CrossEntropy, &wrong_theta, &[&ok]).is_err());
    }

    #[test]
    fn mlp_init_is_deterministic_and_scaled() {
        let m = MlpModel::new(4, 8, 3);
        let a = m.init_params(&mut ChaCha8Rng::seed_from_u64(3));
        let b = m.init_params(&mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        assert_eq!(a.len(), m.param_len());
        assert!(a.as_slice()[..8 * 5].iter().all(|w| w.abs() <= 0.5));
    }

    #[test]
    fn evaluation_metrics() {
        let m = LinearModel::new(1, 2);
        // logits: [x, -x]
        let theta = ParamVector::new(vec![1.0, 0.0, -1.0, 0.0]).unwrap();
        let data = vec![
            sample(&[1.0], Target::Class(0)),
            sample(&[-1.0], Target::Class(1)),
            sample(&[2.0], Target::Class(1)),
        ];
        let e = evaluate(&m, &CrossEntropy, &theta, &data).unwrap();
        assert!((e.accuracy.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(e.mse.is_none());
    }
}
