//! Forward noising with the fitted proposal-noise model, path
//! standardization, and the deterministic reverse update with the
//! exponential noise schedule `sigma(t) = exp(-t)`.
//!
//! The reverse step is a convex combination: with interval `h`,
//! `next = exp(-h) * current + (1 - exp(-h)) * prediction`, so sampling
//! contracts toward the denoiser's predictions at a fixed rate per step.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::proposer::ContextEmbedding;
use crate::rng::{derive_seed, rng_from_seed};
use crate::scene::{BevGrid, Path, Waypoint};
use crate::stats::NoiseModel;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("timestep {timestep} out of range for {steps}-step schedule")]
    TimestepOutOfRange { timestep: usize, steps: usize },
    #[error("invalid noise model: {0}")]
    InvalidNoiseModel(String),
    #[error("standardizer fit failed: {0}")]
    StandardizerFit(String),
    #[error("path length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("invalid reverse grid: {0}")]
    InvalidGrid(String),
    #[error("denoiser failed: {0}")]
    Denoiser(#[from] DenoiseError),
}

/// Error surface for denoiser implementations used during sampling.
#[derive(Debug, Error)]
#[error("{0}")]
pub struct DenoiseError(pub String);

/// Linear variance schedule and its cumulative products.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }
}

/// Build a linear beta schedule with cumulative `alpha_bar` products.
pub fn make_schedule(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<DiffusionSchedule, DiffusionError> {
    if steps == 0 {
        return Err(DiffusionError::InvalidSchedule("steps must be >= 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(DiffusionError::InvalidSchedule(format!(
            "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let mut betas = Vec::with_capacity(steps);
    for i in 0..steps {
        let frac = if steps == 1 {
            0.0
        } else {
            i as f64 / (steps - 1) as f64
        };
        betas.push(beta_start + (beta_end - beta_start) * frac);
    }
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for &beta in &betas {
        acc *= 1.0 - beta;
        alpha_bars.push(acc);
    }
    Ok(DiffusionSchedule { betas, alpha_bars })
}

/// Forward-noise a ground-truth path at schedule timestep `i`:
/// `noised = sqrt(alpha_bar_i) * gt + sqrt(1 - alpha_bar_i) * eps` with
/// `eps` drawn i.i.d. per waypoint per coordinate from the noise model.
pub fn forward_noise(
    gt: &Path,
    timestep: usize,
    schedule: &DiffusionSchedule,
    noise_model: &NoiseModel,
    seed: u64,
) -> Result<Path, DiffusionError> {
    if timestep >= schedule.steps() {
        return Err(DiffusionError::TimestepOutOfRange {
            timestep,
            steps: schedule.steps(),
        });
    }
    noise_model
        .validate()
        .map_err(|e| DiffusionError::InvalidNoiseModel(e.to_string()))?;
    let alpha_bar = schedule.alpha_bars[timestep];
    let signal = alpha_bar.sqrt();
    let noise = (1.0 - alpha_bar).sqrt();
    let mut rng = rng_from_seed(derive_seed(seed, 0xf0a4));
    let dist_x = Normal::new(noise_model.mean_x, noise_model.std_x).expect("validated");
    let dist_y = Normal::new(noise_model.mean_y, noise_model.std_y).expect("validated");
    let waypoints = gt
        .waypoints
        .iter()
        .map(|w| {
            Waypoint::new(
                signal * w.x + noise * dist_x.sample(&mut rng),
                signal * w.y + noise * dist_y.sample(&mut rng),
            )
        })
        .collect();
    Ok(Path {
        dt: gt.dt,
        waypoints,
    })
}

/// The reverse-time value whose noise scale matches forward timestep `i`
/// in the signal-preserving view: `exp(-t) = sqrt((1 - alpha_bar_i) /
/// alpha_bar_i)`, the noise-to-signal ratio of the forward sample once
/// divided by `sqrt(alpha_bar_i)`.
///
/// The reverse trajectory starting from a proposal `gt + eps` stays in
/// the family `gt + exp(-t) * eps`, so conditioning the denoiser on this
/// axis during training matches what it sees while sampling; a raw
/// proposal enters at exactly `t = 0`.
pub fn noise_level_time(schedule: &DiffusionSchedule, timestep: usize) -> f64 {
    let alpha_bar = schedule.alpha_bars[timestep];
    let ratio = ((1.0 - alpha_bar) / alpha_bar).max(1e-300);
    -0.5 * ratio.ln()
}

/// The signal-preserving view of a forward-noised sample: dividing by
/// `sqrt(alpha_bar_i)` maps `sqrt(alpha_bar) * gt + sqrt(1 - alpha_bar) *
/// eps` onto `gt + exp(-t_i) * eps`, the same family the reverse loop
/// walks through.
pub fn signal_preserving_view(
    noised: &Path,
    schedule: &DiffusionSchedule,
    timestep: usize,
) -> Path {
    let inv = 1.0 / schedule.alpha_bars[timestep].sqrt();
    Path {
        dt: noised.dt,
        waypoints: noised
            .waypoints
            .iter()
            .map(|w| Waypoint::new(w.x * inv, w.y * inv))
            .collect(),
    }
}

/// Per-coordinate z-scoring statistics over a noised path dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean_x: f64,
    pub mean_y: f64,
    pub std_x: f64,
    pub std_y: f64,
}

impl Standardizer {
    /// No-op standardizer (mean 0, std 1).
    pub fn identity() -> Self {
        Self {
            mean_x: 0.0,
            mean_y: 0.0,
            std_x: 1.0,
            std_y: 1.0,
        }
    }
}

/// Fit dataset-level z-scoring statistics per coordinate.
pub fn fit_standardizer(noised: &[Path]) -> Result<Standardizer, DiffusionError> {
    if noised.len() < 2 {
        return Err(DiffusionError::StandardizerFit(format!(
            "need >= 2 paths, got {}",
            noised.len()
        )));
    }
    let fit = |pick: fn(&Waypoint) -> f64| -> Result<(f64, f64), DiffusionError> {
        let values: Vec<f64> = noised
            .iter()
            .flat_map(|p| p.waypoints.iter().map(pick))
            .collect();
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let std = var.sqrt();
        if !(std > 0.0) {
            return Err(DiffusionError::StandardizerFit(
                "zero variance in a coordinate".into(),
            ));
        }
        Ok((mean, std))
    };
    let (mean_x, std_x) = fit(|w| w.x)?;
    let (mean_y, std_y) = fit(|w| w.y)?;
    Ok(Standardizer {
        mean_x,
        mean_y,
        std_x,
        std_y,
    })
}

/// Z-score every waypoint with dataset statistics.
pub fn standardize(path: &Path, s: &Standardizer) -> Path {
    Path {
        dt: path.dt,
        waypoints: path
            .waypoints
            .iter()
            .map(|w| Waypoint::new((w.x - s.mean_x) / s.std_x, (w.y - s.mean_y) / s.std_y))
            .collect(),
    }
}

/// Exact inverse of [`standardize`].
pub fn destandardize(path: &Path, s: &Standardizer) -> Path {
    Path {
        dt: path.dt,
        waypoints: path
            .waypoints
            .iter()
            .map(|w| Waypoint::new(w.x * s.std_x + s.mean_x, w.y * s.std_y + s.mean_y))
            .collect(),
    }
}

/// Increasing reverse-time grid; `sigma(t) = exp(-t)` at each node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReverseTimeGrid {
    pub t_values: Vec<f64>,
}

impl ReverseTimeGrid {
    /// `intervals` uniform steps from `t_start` to `t_end`.
    pub fn uniform(intervals: usize, t_start: f64, t_end: f64) -> Result<Self, DiffusionError> {
        if intervals == 0 {
            return Ok(Self {
                t_values: vec![t_start],
            });
        }
        if !(t_end > t_start) {
            return Err(DiffusionError::InvalidGrid(format!(
                "need t_end > t_start, got [{t_start}, {t_end}]"
            )));
        }
        let t_values = (0..=intervals)
            .map(|k| t_start + (t_end - t_start) * k as f64 / intervals as f64)
            .collect();
        Ok(Self { t_values })
    }

    pub fn intervals(&self) -> usize {
        self.t_values.len().saturating_sub(1)
    }

    /// Total contraction factor of the grid, `exp(-(t_end - t_start))`.
    pub fn contraction(&self) -> f64 {
        match (self.t_values.first(), self.t_values.last()) {
            (Some(a), Some(b)) => (-(b - a)).exp(),
            _ => 1.0,
        }
    }

    pub fn sigma(t: f64) -> f64 {
        (-t).exp()
    }

    pub fn validate(&self) -> Result<(), DiffusionError> {
        if self.t_values.is_empty() {
            return Err(DiffusionError::InvalidGrid("empty grid".into()));
        }
        if self.t_values.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(DiffusionError::InvalidGrid(
                "t values must be strictly increasing".into(),
            ));
        }
        Ok(())
    }
}

/// One reverse update over the interval `[t_k, t_k1]`:
/// `sigma(t_k1)/sigma(t_k) * noisy + (1 - exp(-h)) * prediction`.
pub fn reverse_step(
    noisy: &Path,
    prediction: &Path,
    t_k: f64,
    t_k1: f64,
) -> Result<Path, DiffusionError> {
    if noisy.len() != prediction.len() {
        return Err(DiffusionError::LengthMismatch {
            left: noisy.len(),
            right: prediction.len(),
        });
    }
    let h = t_k1 - t_k;
    if !(h > 0.0) {
        return Err(DiffusionError::InvalidGrid(format!(
            "reverse interval must be positive, got {h}"
        )));
    }
    let keep = (-h).exp();
    let blend = 1.0 - keep;
    let waypoints = noisy
        .waypoints
        .iter()
        .zip(&prediction.waypoints)
        .map(|(n, p)| Waypoint::new(keep * n.x + blend * p.x, keep * n.y + blend * p.y))
        .collect();
    Ok(Path {
        dt: noisy.dt,
        waypoints,
    })
}

/// A conditional path denoiser usable by the sampling loop.
pub trait DenoiseModel {
    /// Predict the clean path for the current reverse time `t`.
    fn predict(
        &self,
        noisy: &Path,
        bev: &BevGrid,
        context: &ContextEmbedding,
        t: f64,
    ) -> Result<Path, DenoiseError>;

    /// The z-scoring statistics the model was trained under.
    fn standardizer(&self) -> &Standardizer;
}

/// Run the full reverse loop from a standardized starting path and return
/// the destandardized result.
pub fn sample(
    model: &dyn DenoiseModel,
    bev: &BevGrid,
    context: &ContextEmbedding,
    start: &Path,
    grid: &ReverseTimeGrid,
) -> Result<Path, DiffusionError> {
    grid.validate()?;
    let mut current = start.clone();
    for k in 0..grid.intervals() {
        let t_k = grid.t_values[k];
        let t_k1 = grid.t_values[k + 1];
        let prediction = model.predict(&current, bev, context, t_k)?;
        current = reverse_step(&current, &prediction, t_k, t_k1)?;
    }
    Ok(destandardize(&current, model.standardizer()))
}

/// One denoiser training sample: conditions, the noised input, and the
/// clean target, all in the space the trainer standardized them into.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub bev: BevGrid,
    pub context: ContextEmbedding,
    pub noised_path: Path,
    /// Forward schedule index the noise was drawn at.
    pub timestep: usize,
    /// Reverse-time value used for the timestep embedding.
    pub time: f64,
    pub target: Path,
}

impl TrainingExample {
    pub fn validate(&self, schedule_steps: usize) -> Result<(), DiffusionError> {
        if self.noised_path.len() != self.target.len() {
            return Err(DiffusionError::LengthMismatch {
                left: self.noised_path.len(),
                right: self.target.len(),
            });
        }
        if self.timestep >= schedule_steps {
            return Err(DiffusionError::TimestepOutOfRange {
                timestep: self.timestep,
                steps: schedule_steps,
            });
        }
        Ok(())
    }
}

/// Reference to a cached training example; grids and contexts are
/// re-derived deterministically rather than stored inline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRef {
    pub scenario_id: String,
    pub timestep: usize,
    pub seed: u64,
}
