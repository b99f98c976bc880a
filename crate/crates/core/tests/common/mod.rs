#![allow(dead_code)]

use crosslearn::data::{Sample, Target};
use crosslearn::model::{loss_and_gradient, stochastic_gradient, Loss, Model};
use crosslearn::ParamVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Worst `|g − fd| / (max(|g|, |fd|) + floor)` over all coordinates, with
/// central differences at `h = 1e-5·(1 + |θ_j|)`. The floor absorbs roundoff
/// in the loss itself, about `1e-16·|ℓ| / h`.
pub fn finite_difference_error(model: &dyn Model, loss: &dyn Loss, theta: &ParamVector, batch: &[&Sample]) -> f64 {
    let g = stochastic_gradient(model, loss, theta, batch).unwrap();
    let (l0, _) = loss_and_gradient(model, loss, theta, batch).unwrap();
    let floor = 1e-9 * (1.0 + l0.abs());
    let mut worst: f64 = 0.0;
    let mut probe = theta.as_slice().to_vec();
    for j in 0..theta.len() {
        let t = probe[j];
        let h = 1e-5 * (1.0 + t.abs());
        probe[j] = t + h;
        let up = value(model, loss, &probe, batch);
        probe[j] = t - h;
        let down = value(model, loss, &probe, batch);
        probe[j] = t;
        let fd = (up - down) / (2.0 * h);
        let err = (g[j] - fd).abs() / (g[j].abs().max(fd.abs()) + floor);
        worst = worst.max(err);
    }
    worst
}

fn value(model: &dyn Model, loss: &dyn Loss, theta: &[f64], batch: &[&Sample]) -> f64 {
    let theta = ParamVector::new(theta.to_vec()).unwrap();
    loss_and_gradient(model, loss, &theta, batch).unwrap().0
}

pub fn random_batch(rng: &mut ChaCha8Rng, size: usize, inputs: usize, outputs: usize, classes: bool) -> Vec<Sample> {
    (0..size)
        .map(|_| Sample {
            x: (0..inputs).map(|_| rng.random_range(-2.0..2.0)).collect(),
            y: if classes {
                Target::Class(rng.random_range(0..outputs))
            } else {
                Target::Values((0..outputs).map(|_| rng.random_range(-2.0..2.0)).collect())
            },
        })
        .collect()
}

pub fn random_theta(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> ParamVector {
    ParamVector::new((0..len).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
