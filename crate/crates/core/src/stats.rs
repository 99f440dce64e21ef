//! Normality verification of proposal noise and noise-model fitting.
//!
//! Residuals between proposed and ground-truth paths are tested with the
//! one-sample Kolmogorov-Smirnov test: the empirical distribution function
//! is compared against a normal CDF, and the statistic is mapped to a
//! p-value through the asymptotic Kolmogorov distribution applied to
//! `sqrt(n) * D_n`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::Path;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("empty sample")]
    EmptySample,
    #[error("degenerate sample: needs >= 2 distinct values per coordinate")]
    Degenerate,
    #[error("domain error: {0}")]
    Domain(String),
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("insufficient samples: need >= {needed}, got {got}")]
    Insufficient { needed: usize, got: usize },
}

/// Per-path residuals between a proposed path and the ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSamples {
    pub residual_x: Vec<f64>,
    pub residual_y: Vec<f64>,
}

impl NoiseSamples {
    pub fn len(&self) -> usize {
        self.residual_x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residual_x.is_empty()
    }
}

/// Outcome of one Kolmogorov-Smirnov test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub d_n: f64,
    pub p_value: f64,
    pub n: usize,
    pub passed: bool,
}

/// Gaussian residual model per coordinate, fitted over pooled residuals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseModel {
    pub mean_x: f64,
    pub mean_y: f64,
    pub std_x: f64,
    pub std_y: f64,
    pub sample_count: usize,
}

impl NoiseModel {
    /// A model that adds no noise at all.
    pub fn zero() -> Self {
        Self {
            mean_x: 0.0,
            mean_y: 0.0,
            std_x: 0.0,
            std_y: 0.0,
            sample_count: 0,
        }
    }

    /// Isotropic zero-mean model with the given standard deviation.
    pub fn isotropic(std: f64) -> Self {
        Self {
            mean_x: 0.0,
            mean_y: 0.0,
            std_x: std,
            std_y: std,
            sample_count: 0,
        }
    }

    pub fn validate(&self) -> Result<(), StatsError> {
        if self.std_x < 0.0 || self.std_y < 0.0 {
            return Err(StatsError::Domain("noise stds must be >= 0".into()));
        }
        if ![self.mean_x, self.mean_y, self.std_x, self.std_y]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(StatsError::Domain("noise model is not finite".into()));
        }
        Ok(())
    }
}

/// Per-path verification outcome: per-coordinate tests plus the decision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathNormality {
    pub x: KsResult,
    pub y: KsResult,
    pub passed: bool,
}

/// Dataset-level pass-rate summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalityReport {
    pub total_paths: usize,
    pub passed_paths: usize,
    pub pass_percentage: f64,
}

impl NormalityReport {
    fn from_counts(total: usize, passed: usize) -> Self {
        Self {
            total_paths: total,
            passed_paths: passed,
            pass_percentage: 100.0 * passed as f64 / total as f64,
        }
    }
}

/// Residuals of `proposals - ground_truths`, waypoint by waypoint.
pub fn extract_noise(
    proposals: &[Path],
    ground_truths: &[Path],
) -> Result<Vec<NoiseSamples>, StatsError> {
    if proposals.len() != ground_truths.len() {
        return Err(StatsError::Alignment(format!(
            "{} proposals vs {} ground truths",
            proposals.len(),
            ground_truths.len()
        )));
    }
    proposals
        .iter()
        .zip(ground_truths)
        .enumerate()
        .map(|(i, (p, gt))| {
            if p.len() != gt.len() {
                return Err(StatsError::Alignment(format!(
                    "pair {i}: proposal has {} waypoints, ground truth {}",
                    p.len(),
                    gt.len()
                )));
            }
            Ok(NoiseSamples {
                residual_x: p
                    .waypoints
                    .iter()
                    .zip(&gt.waypoints)
                    .map(|(a, b)| a.x - b.x)
                    .collect(),
                residual_y: p
                    .waypoints
                    .iter()
                    .zip(&gt.waypoints)
                    .map(|(a, b)| a.y - b.y)
                    .collect(),
            })
        })
        .collect()
}

/// Empirical distribution function: the fraction of samples `<= x`.
pub fn edf(samples: &[f64], x: f64) -> Result<f64, StatsError> {
    if samples.is_empty() {
        return Err(StatsError::EmptySample);
    }
    let count = samples.iter().filter(|&&a| a <= x).count();
    Ok(count as f64 / samples.len() as f64)
}

/// Standard normal CDF.
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// One-sample KS statistic against `N(mean, std^2)`.
///
/// The supremum over the step function is exact: at each sorted sample the
/// gap is evaluated on both sides of the jump.
pub fn ks_statistic(samples: &[f64], mean: f64, std: f64) -> Result<f64, StatsError> {
    if samples.is_empty() {
        return Err(StatsError::EmptySample);
    }
    if !(std > 0.0) {
        return Err(StatsError::Degenerate);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len() as f64;
    let mut d = 0.0f64;
    for (i, &a) in sorted.iter().enumerate() {
        let cdf = std_normal_cdf((a - mean) / std);
        d = d
            .max(((i + 1) as f64 / n - cdf).abs())
            .max((i as f64 / n - cdf).abs());
    }
    Ok(d)
}

/// Survival probability of the Kolmogorov distribution,
/// `Pr(K > t) = 2 * sum_{k>=1} (-1)^(k-1) exp(-2 k^2 t^2)`.
///
/// The alternating series is summed until a term drops below 1e-12 or 200
/// terms, and the result is clamped to [0, 1].
pub fn kolmogorov_sf(t: f64) -> Result<f64, StatsError> {
    if !(t > 0.0) {
        return Err(StatsError::Domain(format!(
            "Kolmogorov survival needs t > 0, got {t}"
        )));
    }
    let mut sum = 0.0;
    for k in 1..=200u32 {
        let term = (-2.0 * (k * k) as f64 * t * t).exp();
        if k % 2 == 1 {
            sum += term;
        } else {
            sum -= term;
        }
        if term < 1e-12 {
            break;
        }
    }
    Ok((2.0 * sum).clamp(0.0, 1.0))
}

fn sample_mean_std(samples: &[f64]) -> Result<(f64, f64), StatsError> {
    if samples.len() < 2 {
        return Err(StatsError::Insufficient {
            needed: 2,
            got: samples.len(),
        });
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

fn ks_test(samples: &[f64], mean: f64, std: f64, alpha: f64) -> Result<KsResult, StatsError> {
    let d_n = ks_statistic(samples, mean, std)?;
    let n = samples.len();
    let p_value = kolmogorov_sf((n as f64).sqrt() * d_n)?;
    Ok(KsResult {
        d_n,
        p_value,
        n,
        passed: p_value >= alpha,
    })
}

fn has_two_distinct(samples: &[f64]) -> bool {
    samples
        .first()
        .map(|&f| samples.iter().any(|&v| v != f))
        .unwrap_or(false)
}

/// Per-path normality check: each coordinate is tested against a normal
/// distribution with that sequence's own mean and standard deviation, and
/// the path passes only if both coordinates do.
pub fn is_normal(path_noise: &NoiseSamples, alpha: f64) -> Result<PathNormality, StatsError> {
    if !has_two_distinct(&path_noise.residual_x) || !has_two_distinct(&path_noise.residual_y) {
        return Err(StatsError::Degenerate);
    }
    let (mx, sx) = sample_mean_std(&path_noise.residual_x)?;
    let (my, sy) = sample_mean_std(&path_noise.residual_y)?;
    let x = ks_test(&path_noise.residual_x, mx, sx, alpha)?;
    let y = ks_test(&path_noise.residual_y, my, sy, alpha)?;
    Ok(PathNormality {
        x,
        y,
        passed: x.passed && y.passed,
    })
}

/// Like [`is_normal`], but against a fixed fitted reference model instead
/// of per-sequence estimates.
pub fn is_normal_against(
    path_noise: &NoiseSamples,
    reference: &NoiseModel,
    alpha: f64,
) -> Result<PathNormality, StatsError> {
    let x = ks_test(
        &path_noise.residual_x,
        reference.mean_x,
        reference.std_x,
        alpha,
    )?;
    let y = ks_test(
        &path_noise.residual_y,
        reference.mean_y,
        reference.std_y,
        alpha,
    )?;
    Ok(PathNormality {
        x,
        y,
        passed: x.passed && y.passed,
    })
}

/// Single KS decision on the combined sample of per-coordinate z-scores
/// against the reference model. Used by the pooled verification pipeline,
/// where one decision per pooled group covers both coordinates.
pub fn combined_ks(
    path_noise: &NoiseSamples,
    reference: &NoiseModel,
    alpha: f64,
) -> Result<KsResult, StatsError> {
    if !(reference.std_x > 0.0) || !(reference.std_y > 0.0) {
        return Err(StatsError::Degenerate);
    }
    let mut z = Vec::with_capacity(path_noise.residual_x.len() + path_noise.residual_y.len());
    z.extend(
        path_noise
            .residual_x
            .iter()
            .map(|v| (v - reference.mean_x) / reference.std_x),
    );
    z.extend(
        path_noise
            .residual_y
            .iter()
            .map(|v| (v - reference.mean_y) / reference.std_y),
    );
    ks_test(&z, 0.0, 1.0, alpha)
}

/// Pooled Gaussian fit over all paths and waypoints: per-coordinate mean
/// and unbiased (n-1) standard deviation.
pub fn fit_noise_model(noise: &[NoiseSamples]) -> Result<NoiseModel, StatsError> {
    let xs: Vec<f64> = noise.iter().flat_map(|s| s.residual_x.clone()).collect();
    let ys: Vec<f64> = noise.iter().flat_map(|s| s.residual_y.clone()).collect();
    if xs.len() < 2 || ys.len() < 2 {
        return Err(StatsError::Insufficient {
            needed: 2,
            got: xs.len().min(ys.len()),
        });
    }
    let (mean_x, std_x) = sample_mean_std(&xs)?;
    let (mean_y, std_y) = sample_mean_std(&ys)?;
    Ok(NoiseModel {
        mean_x,
        mean_y,
        std_x,
        std_y,
        sample_count: xs.len(),
    })
}

/// Merge groups of `k` consecutive paths' residuals into pooled samples.
/// A trailing group smaller than `k` is dropped.
pub fn pool_noise(noise: &[NoiseSamples], k: usize) -> Vec<NoiseSamples> {
    assert!(k >= 1, "pool size must be >= 1");
    noise
        .chunks_exact(k)
        .map(|chunk| NoiseSamples {
            residual_x: chunk.iter().flat_map(|s| s.residual_x.clone()).collect(),
            residual_y: chunk.iter().flat_map(|s| s.residual_y.clone()).collect(),
        })
        .collect()
}

/// How reference parameters are chosen for verification.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReferenceMode {
    /// Each tested sequence supplies its own mean/std.
    PerSequence,
    /// All sequences are tested against one fitted model.
    Fitted(NoiseModel),
}

/// How per-coordinate evidence is turned into a pass/fail decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecisionRule {
    /// Both coordinates must individually pass.
    PerCoordinateAnd,
    /// One KS test on the combined standardized sample decides
    /// (requires a fitted reference).
    Combined,
}

/// Verification outcome for one path or pooled group.
#[derive(Debug, Clone, PartialEq)]
pub struct PathVerdict {
    /// Residual count per coordinate.
    pub n: usize,
    pub x: Option<KsResult>,
    pub y: Option<KsResult>,
    pub combined: Option<KsResult>,
    pub passed: bool,
}

/// Run the KS verification over every path with the given reference and
/// decision rule. Degenerate paths are reported as not-passed rather than
/// aborting the batch.
pub fn verify_paths(
    noise: &[NoiseSamples],
    alpha: f64,
    reference: ReferenceMode,
    rule: DecisionRule,
) -> Vec<PathVerdict> {
    noise
        .iter()
        .map(|sample| {
            let per_coord = match reference {
                ReferenceMode::PerSequence => is_normal(sample, alpha),
                ReferenceMode::Fitted(model) => is_normal_against(sample, &model, alpha),
            };
            let combined = match (rule, reference) {
                (DecisionRule::Combined, ReferenceMode::Fitted(model)) => {
                    combined_ks(sample, &model, alpha).ok()
                }
                (DecisionRule::Combined, ReferenceMode::PerSequence) => {
                    let fit = (
                        sample_mean_std(&sample.residual_x),
                        sample_mean_std(&sample.residual_y),
                    );
                    if let (Ok((mx, sx)), Ok((my, sy))) = fit {
                        combined_ks(
                            sample,
                            &NoiseModel {
                                mean_x: mx,
                                mean_y: my,
                                std_x: sx,
                                std_y: sy,
                                sample_count: sample.len(),
                            },
                            alpha,
                        )
                        .ok()
                    } else {
                        None
                    }
                }
                (DecisionRule::PerCoordinateAnd, _) => None,
            };
            let passed = match rule {
                DecisionRule::PerCoordinateAnd => {
                    per_coord.as_ref().map(|p| p.passed).unwrap_or(false)
                }
                DecisionRule::Combined => combined.map(|c| c.passed).unwrap_or(false),
            };
            let (x, y) = match per_coord {
                Ok(p) => (Some(p.x), Some(p.y)),
                Err(_) => (None, None),
            };
            PathVerdict {
                n: sample.len(),
                x,
                y,
                combined,
                passed,
            }
        })
        .collect()
}

/// Aggregate verdicts into the pass-rate summary.
pub fn report_from_verdicts(verdicts: &[PathVerdict]) -> Result<NormalityReport, StatsError> {
    if verdicts.is_empty() {
        return Err(StatsError::EmptySample);
    }
    let passed = verdicts.iter().filter(|v| v.passed).count();
    Ok(NormalityReport::from_counts(verdicts.len(), passed))
}

/// Per-path pass-rate report: applies [`is_normal`] to every path, with
/// degenerate paths counted as not-passed.
pub fn normality_report(noise: &[NoiseSamples], alpha: f64) -> Result<NormalityReport, StatsError> {
    let verdicts = verify_paths(
        noise,
        alpha,
        ReferenceMode::PerSequence,
        DecisionRule::PerCoordinateAnd,
    );
    report_from_verdicts(&verdicts)
}
