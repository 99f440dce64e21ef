//! Mini-batch training with adaptive-moment updates and exact gradients.
//!
//! Per-example gradients are evaluated in parallel but reduced in fixed
//! index order, and the shuffle is seeded, so a training run is
//! bit-reproducible regardless of worker count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Conditioning, Denoiser, DenoiserError, LossBreakdown};
use crate::diffusion::TrainingExample;
use crate::rng::{derive_seed, rng_from_seed};
use rand::Rng;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty training dataset")]
    EmptyDataset,
    #[error("non-finite loss at step {step} on dataset examples {examples:?}")]
    NonFiniteLoss { step: usize, examples: Vec<usize> },
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
}

/// Optimizer and schedule settings for one training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Training examples drawn per scenario when building datasets.
    pub examples_per_scenario: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 32,
            steps: 3000,
            examples_per_scenario: 4,
        }
    }
}

/// One row of the training loss curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub waypoint_mse: f64,
    pub cumsum_mse: f64,
    pub total: f64,
}

/// Fisher-Yates with the given RNG; keeps the shuffle independent of
/// slice-shuffle implementation details of the rand crate.
fn shuffle_indices(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

pub(crate) struct PreparedExample {
    pub inputs: super::net::Mat,
    pub cond: Conditioning,
    pub time: f64,
    pub target: super::net::Mat,
}

/// Train a copy of `model` on the dataset; returns the trained model and
/// the per-step loss curve. Deterministic for a fixed `seed`.
pub fn train(
    model: &Denoiser,
    dataset: &[TrainingExample],
    config: &OptimizerConfig,
    seed: u64,
) -> Result<(Denoiser, Vec<LossPoint>), TrainError> {
    let prepared: Vec<PreparedExample> = dataset
        .iter()
        .map(|ex| -> Result<PreparedExample, DenoiserError> {
            Ok(PreparedExample {
                inputs: model.path_to_mat(&ex.noised_path)?,
                cond: model.prepare_conditioning(&ex.bev, &ex.context)?,
                time: ex.time,
                target: model.path_to_mat(&ex.target)?,
            })
        })
        .collect::<Result<_, _>>()?;
    train_prepared(model, &prepared, config, seed)
}

/// Training core over pre-assembled inputs; lets callers share per-
/// scenario conditioning instead of cloning grids per example.
pub(crate) fn train_prepared(
    model: &Denoiser,
    prepared: &[PreparedExample],
    config: &OptimizerConfig,
    seed: u64,
) -> Result<(Denoiser, Vec<LossPoint>), TrainError> {
    if prepared.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut trained = model.clone();
    let pcount = trained.param_count();
    let mut first_moment = vec![0.0; pcount];
    let mut second_moment = vec![0.0; pcount];
    let mut curve = Vec::with_capacity(config.steps);
    let mut shuffle_rng = rng_from_seed(derive_seed(seed, 0x5f0f));
    let batch_size = config.batch_size.max(1).min(prepared.len());

    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0usize;
    for step in 1..=config.steps {
        if cursor + batch_size > order.len() {
            order = shuffle_indices(prepared.len(), &mut shuffle_rng);
            cursor = 0;
        }
        let batch = &order[cursor..cursor + batch_size];
        cursor += batch_size;

        // Parallel per-example gradients, reduced in batch order.
        let results: Vec<(Vec<f64>, LossBreakdown)> = batch
            .par_iter()
            .map(|&idx| {
                let ex = &prepared[idx];
                let mut grads = vec![0.0; pcount];
                let loss =
                    trained.loss_and_grad(&ex.inputs, &ex.cond, ex.time, &ex.target, &mut grads);
                (grads, loss)
            })
            .collect();

        let inv_batch = 1.0 / batch_size as f64;
        let mut grads = vec![0.0; pcount];
        let mut waypoint = 0.0;
        let mut cumsum = 0.0;
        for (g, loss) in &results {
            for (acc, v) in grads.iter_mut().zip(g) {
                *acc += v;
            }
            waypoint += loss.waypoint_mse;
            cumsum += loss.cumsum_mse;
        }
        for g in &mut grads {
            *g *= inv_batch;
        }
        waypoint *= inv_batch;
        cumsum *= inv_batch;
        let total = waypoint + cumsum;
        if !total.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                step,
                examples: batch.to_vec(),
            });
        }

        // Adam with bias correction.
        let t = step as f64;
        let bias1 = 1.0 - config.beta1.powf(t);
        let bias2 = 1.0 - config.beta2.powf(t);
        let params = trained.params_mut();
        for i in 0..pcount {
            let g = grads[i];
            first_moment[i] = config.beta1 * first_moment[i] + (1.0 - config.beta1) * g;
            second_moment[i] = config.beta2 * second_moment[i] + (1.0 - config.beta2) * g * g;
            let m_hat = first_moment[i] / bias1;
            let v_hat = second_moment[i] / bias2;
            params[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }

        curve.push(LossPoint {
            step,
            waypoint_mse: waypoint,
            cumsum_mse: cumsum,
            total,
        });
    }

    Ok((trained, curve))
}
