//! Stage glue: align responses with scenarios, build the noised training
//! set, and train a denoiser end to end.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::denoiser::{Denoiser, DenoiserConfig, DenoiserError, LossPoint, OptimizerConfig, TrainError};
use crate::diffusion::{
    fit_standardizer, forward_noise, make_schedule, noise_level_time, signal_preserving_view,
    standardize, DiffusionError, ExampleRef, Standardizer, TrainingExample,
};
use crate::proposer::{ContextEncoder, ResponseRecord, StructuredResponse};
use crate::rng::{derive_seed, rng_from_seed};
use crate::scene::{rasterize_bev, GridConfig, Scenario, SceneError};
use crate::stats::NoiseModel;
use rand::Rng;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("data alignment: {0}")]
    Alignment(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Forward diffusion schedule constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// Reverse sampling grid constants: uniform intervals keep the per-step
/// contraction rate constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReverseGridConfig {
    pub intervals: usize,
    pub t_start: f64,
    pub t_end: f64,
}

impl Default for ReverseGridConfig {
    fn default() -> Self {
        Self {
            intervals: 10,
            t_start: 0.0,
            t_end: 3.0,
        }
    }
}

/// Order the responses to match the scenario sequence by `scenario_id`.
/// Every scenario must have a response and vice versa.
pub fn align_responses(
    scenarios: &[Scenario],
    records: &[ResponseRecord],
) -> Result<Vec<StructuredResponse>, PipelineError> {
    let mut by_id: HashMap<&str, &ResponseRecord> = HashMap::with_capacity(records.len());
    for r in records {
        if by_id.insert(r.scenario_id.as_str(), r).is_some() {
            return Err(PipelineError::Alignment(format!(
                "duplicate response for scenario \"{}\"",
                r.scenario_id
            )));
        }
    }
    for r in records {
        if !scenarios.iter().any(|s| s.id == r.scenario_id) {
            return Err(PipelineError::Alignment(format!(
                "response references unknown scenario \"{}\"",
                r.scenario_id
            )));
        }
    }
    scenarios
        .iter()
        .map(|s| {
            by_id
                .get(s.id.as_str())
                .map(|r| r.response())
                .ok_or_else(|| {
                    PipelineError::Alignment(format!("no response for scenario \"{}\"", s.id))
                })
        })
        .collect()
}

/// Per-scenario conditioning inputs, shared by that scenario's examples.
#[derive(Debug, Clone)]
pub struct ScenarioCond {
    pub bev: crate::scene::BevGrid,
    pub context: crate::proposer::ContextEmbedding,
}

/// One noised example referencing its scenario's conditioning by index.
#[derive(Debug, Clone)]
pub struct DatasetItem {
    pub scenario: usize,
    pub noised_path: crate::scene::Path,
    pub timestep: usize,
    pub time: f64,
    pub target: crate::scene::Path,
}

/// A built training set plus its standardizer and cache references.
/// Conditioning grids are stored once per scenario, not per example.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub conds: Vec<ScenarioCond>,
    pub items: Vec<DatasetItem>,
    pub standardizer: Standardizer,
    pub refs: Vec<ExampleRef>,
    pub schedule_steps: usize,
}

impl DatasetBundle {
    /// Materialize the spec-shaped example list (clones conditioning per
    /// example; intended for small datasets and tests).
    pub fn examples(&self) -> Vec<TrainingExample> {
        self.items
            .iter()
            .map(|item| TrainingExample {
                bev: self.conds[item.scenario].bev.clone(),
                context: self.conds[item.scenario].context.clone(),
                noised_path: item.noised_path.clone(),
                timestep: item.timestep,
                time: item.time,
                target: item.target.clone(),
            })
            .collect()
    }
}

/// Build the noised training set: per scenario, draw
/// `examples_per_scenario` uniform timesteps, forward-noise the ground
/// truth with the fitted noise model, then standardize inputs and targets
/// with dataset-level statistics.
#[allow(clippy::too_many_arguments)]
pub fn build_training_set(
    scenarios: &[Scenario],
    responses: &[StructuredResponse],
    noise_model: &NoiseModel,
    grid: &GridConfig,
    schedule_cfg: &ScheduleConfig,
    d_model: usize,
    table_seed: u64,
    examples_per_scenario: usize,
    seed: u64,
) -> Result<DatasetBundle, PipelineError> {
    build_training_set_with_time(
        scenarios,
        responses,
        noise_model,
        grid,
        schedule_cfg,
        d_model,
        table_seed,
        examples_per_scenario,
        seed,
        TimeMap::NoiseLevel,
    )
}

/// How training examples map the forward timestep onto the embedding axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeMap {
    /// Reverse-time value whose sigma matches the view's noise scale.
    NoiseLevel,
    /// Linear index fraction scaled onto the sampling span.
    IndexFraction,
}

#[allow(clippy::too_many_arguments)]
pub fn build_training_set_with_time(
    scenarios: &[Scenario],
    responses: &[StructuredResponse],
    noise_model: &NoiseModel,
    grid: &GridConfig,
    schedule_cfg: &ScheduleConfig,
    d_model: usize,
    table_seed: u64,
    examples_per_scenario: usize,
    seed: u64,
    time_map: TimeMap,
) -> Result<DatasetBundle, PipelineError> {
    if scenarios.len() != responses.len() {
        return Err(PipelineError::Alignment(format!(
            "{} scenarios vs {} responses",
            scenarios.len(),
            responses.len()
        )));
    }
    let schedule = make_schedule(schedule_cfg.steps, schedule_cfg.beta_start, schedule_cfg.beta_end)?;
    let encoder = ContextEncoder::new(table_seed, d_model);
    let per = examples_per_scenario.max(1);

    // Draw timesteps and noise first so the standardizer sees the full
    // noised dataset.
    let mut timestep_rng = rng_from_seed(derive_seed(seed, 0x7157));
    let mut raw: Vec<(usize, usize, u64)> = Vec::with_capacity(scenarios.len() * per);
    for (idx, _) in scenarios.iter().enumerate() {
        for k in 0..per {
            let timestep = timestep_rng.gen_range(0..schedule.steps());
            let noise_seed = derive_seed(seed, (idx * per + k) as u64);
            raw.push((idx, timestep, noise_seed));
        }
    }
    // The denoiser consumes the signal-preserving view of each noised
    // sample so training inputs live in the same `gt + sigma(t) * eps`
    // family the reverse loop walks through.
    let noised: Vec<crate::scene::Path> = raw
        .iter()
        .map(|&(idx, timestep, noise_seed)| {
            forward_noise(
                &scenarios[idx].gt_path,
                timestep,
                &schedule,
                noise_model,
                noise_seed,
            )
            .map(|p| signal_preserving_view(&p, &schedule, timestep))
        })
        .collect::<Result<_, _>>()?;
    let standardizer = fit_standardizer(&noised)?;

    let conds: Vec<ScenarioCond> = scenarios
        .iter()
        .zip(responses)
        .map(|(scenario, response)| -> Result<ScenarioCond, PipelineError> {
            Ok(ScenarioCond {
                bev: rasterize_bev(scenario, grid)?,
                context: encoder.encode(response),
            })
        })
        .collect::<Result<_, _>>()?;

    let mut items = Vec::with_capacity(raw.len());
    let mut refs = Vec::with_capacity(raw.len());
    for ((idx, timestep, noise_seed), noised_path) in raw.into_iter().zip(noised) {
        let scenario = &scenarios[idx];
        let time = match time_map {
            TimeMap::NoiseLevel => noise_level_time(&schedule, timestep),
            TimeMap::IndexFraction => 3.0 * timestep as f64 / schedule.steps() as f64,
        };
        items.push(DatasetItem {
            scenario: idx,
            noised_path: standardize(&noised_path, &standardizer),
            timestep,
            time,
            target: standardize(&scenario.gt_path, &standardizer),
        });
        refs.push(ExampleRef {
            scenario_id: scenario.id.clone(),
            timestep,
            seed: noise_seed,
        });
    }

    Ok(DatasetBundle {
        conds,
        items,
        standardizer,
        refs,
        schedule_steps: schedule.steps(),
    })
}

/// Initialize and train one denoiser on a built dataset.
pub fn train_denoiser(
    config: &DenoiserConfig,
    bundle: &DatasetBundle,
    optimizer: &OptimizerConfig,
    seed: u64,
) -> Result<Denoiser, PipelineError> {
    Ok(train_denoiser_with_curve(config, bundle, optimizer, seed)?.0)
}

/// As [`train_denoiser`], also returning the loss curve.
pub fn train_denoiser_with_curve(
    config: &DenoiserConfig,
    bundle: &DatasetBundle,
    optimizer: &OptimizerConfig,
    seed: u64,
) -> Result<(Denoiser, Vec<LossPoint>), PipelineError> {
    let model = Denoiser::init(*config, derive_seed(seed, 0x1417), bundle.standardizer)?;
    let prepared: Vec<crate::denoiser::PreparedExample> = bundle
        .items
        .iter()
        .map(|item| -> Result<crate::denoiser::PreparedExample, PipelineError> {
            if item.timestep >= bundle.schedule_steps {
                return Err(PipelineError::Diffusion(
                    crate::diffusion::DiffusionError::TimestepOutOfRange {
                        timestep: item.timestep,
                        steps: bundle.schedule_steps,
                    },
                ));
            }
            let cond = &bundle.conds[item.scenario];
            Ok(crate::denoiser::PreparedExample {
                inputs: model.path_to_mat_for_training(&item.noised_path)?,
                cond: model.prepare_conditioning(&cond.bev, &cond.context)?,
                time: item.time,
                target: model.path_to_mat_for_training(&item.target)?,
            })
        })
        .collect::<Result<_, _>>()?;
    let (trained, curve) = crate::denoiser::train_prepared(
        &model,
        &prepared,
        optimizer,
        derive_seed(seed, 0x7ea1),
    )?;
    Ok((trained, curve))
}
