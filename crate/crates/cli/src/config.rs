//! Run configuration: one JSON document with defaults for every stage,
//! `--set key=value` dotted-path overrides, and unknown-key rejection.

use serde::{Deserialize, Serialize};

use diffplan_core::denoiser::{DenoiserConfig, OptimizerConfig};
use diffplan_core::eval::{CollisionMode, L2Mode};
use diffplan_core::pipeline::{ReverseGridConfig, ScheduleConfig};
use diffplan_core::scene::{GridConfig, ScenarioConfig};
use diffplan_core::stats::NoiseModel;

use crate::CliError;

/// Default Gaussian proposal-noise parameters, used when no fitted noise
/// model file is supplied.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseDefaults {
    pub mean_x: f64,
    pub mean_y: f64,
    pub std_x: f64,
    pub std_y: f64,
}

impl Default for NoiseDefaults {
    fn default() -> Self {
        Self {
            mean_x: 0.0,
            mean_y: 0.0,
            std_x: 0.5,
            std_y: 0.5,
        }
    }
}

impl NoiseDefaults {
    pub fn to_model(self) -> NoiseModel {
        NoiseModel {
            mean_x: self.mean_x,
            mean_y: self.mean_y,
            std_x: self.std_x,
            std_y: self.std_y,
            sample_count: 0,
        }
    }
}

/// The whole pipeline configuration. Every field has a default; unknown
/// keys are rejected so typos fail loudly.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Base seed; stage seeds derive from it.
    pub seed: u64,
    /// Worker threads; 0 uses all cores. Outputs do not depend on it.
    pub jobs: usize,
    /// Significance level for the KS verification.
    pub alpha: f64,
    /// Seed of the context embedding tables.
    pub table_seed: u64,
    pub scenario: ScenarioConfig,
    pub grid: GridConfig,
    pub noise: NoiseDefaults,
    pub schedule: ScheduleConfig,
    pub reverse: ReverseGridConfig,
    pub denoiser: DenoiserConfig,
    pub optimizer: OptimizerConfig,
    pub l2_mode: L2Mode,
    pub collision_mode: CollisionMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            jobs: 0,
            alpha: 0.05,
            table_seed: 42,
            scenario: ScenarioConfig::default(),
            grid: GridConfig::default(),
            noise: NoiseDefaults::default(),
            schedule: ScheduleConfig::default(),
            reverse: ReverseGridConfig::default(),
            denoiser: DenoiserConfig::default(),
            optimizer: OptimizerConfig::default(),
            l2_mode: L2Mode::Avg,
            collision_mode: CollisionMode::Scenario,
        }
    }
}

impl RunConfig {
    /// The denoiser config with grid channels and path horizon synced
    /// from their owning sections, so the three can never disagree.
    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            bev_channels: self.grid.channels,
            horizon: self.scenario.horizon,
            ..self.denoiser
        }
    }
}

/// Apply one `key=value` override to a JSON tree; dotted keys descend
/// into nested sections. Values parse as JSON scalars, falling back to
/// strings.
fn apply_set(tree: &mut serde_json::Value, spec: &str) -> Result<(), CliError> {
    let (key, value) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set needs key=value, got \"{spec}\"")))?;
    let parsed: serde_json::Value = serde_json::from_str(value)
        .unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| {
            CliError::Config(format!("config key \"{key}\" does not name an object field"))
        })?;
        if i + 1 == parts.len() {
            if !obj.contains_key(*part) {
                return Err(CliError::Config(format!(
                    "unknown config key \"{key}\" (no field \"{part}\")"
                )));
            }
            obj.insert((*part).to_string(), parsed);
            return Ok(());
        }
        node = obj.get_mut(*part).ok_or_else(|| {
            CliError::Config(format!("unknown config section \"{part}\" in \"{key}\""))
        })?;
    }
    Ok(())
}

/// Load the config: the file when given (else defaults), then `--set`
/// overrides, then strict deserialization.
pub fn load_config(
    path: Option<&std::path::Path>,
    sets: &[String],
    seed_override: Option<u64>,
    jobs_override: Option<usize>,
) -> Result<RunConfig, CliError> {
    let mut tree = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| {
                CliError::Config(format!("cannot read config {}: {e}", p.display()))
            })?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("config {}: {e}", p.display())))?
        }
        None => serde_json::to_value(RunConfig::default())
            .expect("default config always serializes"),
    };
    for spec in sets {
        apply_set(&mut tree, spec)?;
    }
    let mut config: RunConfig = serde_json::from_value(tree)
        .map_err(|e| CliError::Config(format!("invalid config: {e}")))?;
    if let Some(seed) = seed_override {
        config.seed = seed;
    }
    if let Some(jobs) = jobs_override {
        config.jobs = jobs;
    }
    if !(config.alpha >= 0.0 && config.alpha <= 1.0) {
        return Err(CliError::Config(format!(
            "alpha must lie in [0, 1], got {}",
            config.alpha
        )));
    }
    Ok(config)
}
