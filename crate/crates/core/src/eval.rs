//! Open-loop planning metrics: L2 error at fixed horizons and collision
//! rate from ego-box placement along the planned path, plus the ablation
//! harness that trains and scores one model per conditioning-flag set.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{sample, standardize, DenoiseModel, DiffusionError, ReverseTimeGrid};
use crate::geom;
use crate::pipeline::{self, PipelineError, ReverseGridConfig, ScheduleConfig};
use crate::proposer::{ContextEncoder, StructuredResponse};
use crate::scene::{rasterize_bev, GridConfig, OrientedBox, Path, Scenario, SceneError};
use crate::stats::NoiseModel;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("horizon {horizon_s} s is off the waypoint grid (dt = {dt} s, n = {n})")]
    HorizonOffGrid { horizon_s: f64, dt: f64, n: usize },
    #[error("path length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

/// How L2 error is reduced at a horizon: mean over all waypoints up to the
/// horizon, or the single waypoint at it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum L2Mode {
    Avg,
    Point,
}

/// Collision counting: per-scenario any-intersection, or per-waypoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CollisionMode {
    Scenario,
    Waypoint,
}

/// Open-loop metric summary over a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub l2_1s: f64,
    pub l2_2s: f64,
    pub l2_3s: f64,
    pub l2_avg: f64,
    pub coll_1s: f64,
    pub coll_2s: f64,
    pub coll_3s: f64,
    pub coll_avg: f64,
    pub scenario_count: usize,
}

/// Index of the waypoint exactly at `horizon_s`, or an error when the
/// horizon misses the grid.
fn horizon_index(path: &Path, horizon_s: f64) -> Result<usize, EvalError> {
    let steps = horizon_s / path.dt;
    let idx = steps.round();
    if (steps - idx).abs() > 1e-9 || idx < 1.0 || (idx as usize) > path.len() {
        return Err(EvalError::HorizonOffGrid {
            horizon_s,
            dt: path.dt,
            n: path.len(),
        });
    }
    Ok(idx as usize - 1)
}

pub const EVAL_HORIZONS_S: [f64; 3] = [1.0, 2.0, 3.0];

/// L2 error at the 1/2/3 s horizons plus their mean.
pub fn l2_at_horizons(
    pred: &Path,
    gt: &Path,
    mode: L2Mode,
) -> Result<(f64, f64, f64, f64), EvalError> {
    if pred.len() != gt.len() {
        return Err(EvalError::LengthMismatch {
            left: pred.len(),
            right: gt.len(),
        });
    }
    let dist: Vec<f64> = pred
        .waypoints
        .iter()
        .zip(&gt.waypoints)
        .map(|(a, b)| a.distance(b))
        .collect();
    let mut values = [0.0; 3];
    for (v, &h) in values.iter_mut().zip(&EVAL_HORIZONS_S) {
        let idx = horizon_index(pred, h)?;
        *v = match mode {
            L2Mode::Avg => dist[..=idx].iter().sum::<f64>() / (idx + 1) as f64,
            L2Mode::Point => dist[idx],
        };
    }
    Ok((
        values[0],
        values[1],
        values[2],
        (values[0] + values[1] + values[2]) / 3.0,
    ))
}

/// Exact oriented-rectangle intersection; touching counts as intersecting.
pub fn boxes_intersect(a: &OrientedBox, b: &OrientedBox) -> bool {
    geom::obbs_intersect(a, b)
}

/// Signed overlap margin from the separating-axis projections; see
/// [`geom::obb_overlap_margin`]. Used to exclude knife-edge cases from
/// oracle comparisons.
pub fn boxes_overlap_margin(a: &OrientedBox, b: &OrientedBox) -> f64 {
    geom::obb_overlap_margin(a, b)
}

/// Ego heading at each waypoint: direction to the next waypoint, the last
/// waypoint reusing the previous heading, zero displacement reading as
/// heading 0.
pub fn ego_headings(path: &Path) -> Vec<f64> {
    let n = path.len();
    let mut headings = vec![0.0; n];
    for j in 0..n {
        if j + 1 < n {
            let dx = path.waypoints[j + 1].x - path.waypoints[j].x;
            let dy = path.waypoints[j + 1].y - path.waypoints[j].y;
            headings[j] = if dx == 0.0 && dy == 0.0 {
                0.0
            } else {
                dy.atan2(dx)
            };
        } else if j > 0 {
            headings[j] = headings[j - 1];
        }
    }
    headings
}

/// Which waypoint placements up to `horizon_s` put the ego box in
/// intersection with an obstacle propagated to that waypoint's time.
pub fn colliding_placements(
    pred: &Path,
    scenario: &Scenario,
    horizon_s: f64,
) -> Result<Vec<bool>, EvalError> {
    let last = horizon_index(pred, horizon_s)?;
    let headings = ego_headings(pred);
    let mut hits = vec![false; last + 1];
    for j in 0..=last {
        let w = &pred.waypoints[j];
        let ego = scenario.ego_box_at(w.x, w.y, headings[j]);
        let t = pred.time_of(j);
        hits[j] = scenario
            .obstacles
            .iter()
            .any(|o| boxes_intersect(&ego, &o.box_at(t)));
    }
    Ok(hits)
}

/// Per-scenario collision rate at a horizon, in percent: 100 when any
/// placement up to the horizon intersects an obstacle, else 0.
pub fn collision_rate(pred: &Path, scenario: &Scenario, horizon_s: f64) -> Result<f64, EvalError> {
    let hits = colliding_placements(pred, scenario, horizon_s)?;
    Ok(if hits.iter().any(|&h| h) { 100.0 } else { 0.0 })
}

/// Everything needed to evaluate a model over scenarios.
#[derive(Debug, Clone)]
pub struct EvalSettings {
    pub grid: GridConfig,
    pub reverse: ReverseGridConfig,
    pub table_seed: u64,
    pub d_model: usize,
    pub l2_mode: L2Mode,
    pub collision_mode: CollisionMode,
}

/// Per-scenario evaluation artifacts (for overlays and inspection).
#[derive(Debug, Clone)]
pub struct ScenarioEval {
    pub id: String,
    pub gt: Path,
    pub proposal: Path,
    pub sampled: Path,
}

/// Reports for the denoised paths and the raw proposals (baseline).
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub sampled: EvalReport,
    pub proposal: EvalReport,
    pub per_scenario: Vec<ScenarioEval>,
}

struct PathMetrics {
    l2: (f64, f64, f64),
    hits: [Vec<bool>; 3],
}

fn path_metrics(
    pred: &Path,
    scenario: &Scenario,
    l2_mode: L2Mode,
) -> Result<PathMetrics, EvalError> {
    let (a, b, c, _) = l2_at_horizons(pred, &scenario.gt_path, l2_mode)?;
    let hits = [
        colliding_placements(pred, scenario, EVAL_HORIZONS_S[0])?,
        colliding_placements(pred, scenario, EVAL_HORIZONS_S[1])?,
        colliding_placements(pred, scenario, EVAL_HORIZONS_S[2])?,
    ];
    Ok(PathMetrics { l2: (a, b, c), hits })
}

fn aggregate(metrics: &[PathMetrics], mode: CollisionMode) -> EvalReport {
    let n = metrics.len().max(1) as f64;
    let mut l2 = [0.0f64; 3];
    for m in metrics {
        l2[0] += m.l2.0;
        l2[1] += m.l2.1;
        l2[2] += m.l2.2;
    }
    for v in &mut l2 {
        *v /= n;
    }
    let mut coll = [0.0f64; 3];
    for k in 0..3 {
        match mode {
            CollisionMode::Scenario => {
                let colliding = metrics
                    .iter()
                    .filter(|m| m.hits[k].iter().any(|&h| h))
                    .count();
                coll[k] = 100.0 * colliding as f64 / n;
            }
            CollisionMode::Waypoint => {
                let total: usize = metrics.iter().map(|m| m.hits[k].len()).sum();
                let hit: usize = metrics
                    .iter()
                    .map(|m| m.hits[k].iter().filter(|&&h| h).count())
                    .sum();
                coll[k] = if total == 0 {
                    0.0
                } else {
                    100.0 * hit as f64 / total as f64
                };
            }
        }
    }
    EvalReport {
        l2_1s: l2[0],
        l2_2s: l2[1],
        l2_3s: l2[2],
        l2_avg: (l2[0] + l2[1] + l2[2]) / 3.0,
        coll_1s: coll[0],
        coll_2s: coll[1],
        coll_3s: coll[2],
        coll_avg: (coll[0] + coll[1] + coll[2]) / 3.0,
        scenario_count: metrics.len(),
    }
}

/// Evaluate a model open-loop over scenarios with aligned responses: run
/// diffusion sampling from each proposal and score both the sampled paths
/// and the raw proposals against ground truth.
pub fn run_eval(
    model: &(dyn DenoiseModel + Sync),
    scenarios: &[Scenario],
    responses: &[StructuredResponse],
    settings: &EvalSettings,
) -> Result<EvalOutcome, EvalError> {
    assert_eq!(
        scenarios.len(),
        responses.len(),
        "scenarios and responses must be aligned"
    );
    let encoder = ContextEncoder::new(settings.table_seed, settings.d_model);
    let reverse = ReverseTimeGrid::uniform(
        settings.reverse.intervals,
        settings.reverse.t_start,
        settings.reverse.t_end,
    )?;

    let evaluated: Vec<Result<(ScenarioEval, PathMetrics, PathMetrics), EvalError>> = scenarios
        .par_iter()
        .zip(responses.par_iter())
        .map(|(scenario, response)| {
            let bev = rasterize_bev(scenario, &settings.grid)?;
            let context = encoder.encode(response);
            let start = standardize(&response.proposed_path, model.standardizer());
            let sampled = sample(model, &bev, &context, &start, &reverse)?;
            let sampled_metrics = path_metrics(&sampled, scenario, settings.l2_mode)?;
            let proposal_metrics =
                path_metrics(&response.proposed_path, scenario, settings.l2_mode)?;
            Ok((
                ScenarioEval {
                    id: scenario.id.clone(),
                    gt: scenario.gt_path.clone(),
                    proposal: response.proposed_path.clone(),
                    sampled,
                },
                sampled_metrics,
                proposal_metrics,
            ))
        })
        .collect();

    let mut per_scenario = Vec::with_capacity(scenarios.len());
    let mut sampled_metrics = Vec::with_capacity(scenarios.len());
    let mut proposal_metrics = Vec::with_capacity(scenarios.len());
    for item in evaluated {
        let (s, sm, pm) = item?;
        per_scenario.push(s);
        sampled_metrics.push(sm);
        proposal_metrics.push(pm);
    }

    Ok(EvalOutcome {
        sampled: aggregate(&sampled_metrics, settings.collision_mode),
        proposal: aggregate(&proposal_metrics, settings.collision_mode),
        per_scenario,
    })
}

/// One ablation table row: conditioning flags and the averaged metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub use_tse: bool,
    pub use_caf: bool,
    pub use_cap: bool,
    pub use_bfc: bool,
    pub l2_avg: f64,
    pub coll_avg: f64,
}

/// Train and evaluate one model per flag combination on identical data
/// and seeds; rows come back in the order requested.
#[allow(clippy::too_many_arguments)]
pub fn ablation_run(
    base: &crate::denoiser::DenoiserConfig,
    combos: &[[bool; 4]],
    train_scenarios: &[Scenario],
    train_responses: &[StructuredResponse],
    eval_scenarios: &[Scenario],
    eval_responses: &[StructuredResponse],
    noise_model: &NoiseModel,
    schedule: &ScheduleConfig,
    optimizer: &crate::denoiser::OptimizerConfig,
    settings: &EvalSettings,
    seed: u64,
) -> Result<Vec<AblationRow>, EvalError> {
    // The noised dataset is flag-independent; build it once.
    let bundle = pipeline::build_training_set(
        train_scenarios,
        train_responses,
        noise_model,
        &settings.grid,
        schedule,
        settings.d_model,
        settings.table_seed,
        optimizer.examples_per_scenario,
        seed,
    )?;

    let mut rows = Vec::with_capacity(combos.len());
    for &[tse, caf, cap, bfc] in combos {
        let config = crate::denoiser::DenoiserConfig {
            use_tse: tse,
            use_caf: caf,
            use_cap: cap,
            use_bfc: bfc,
            ..*base
        };
        let model = pipeline::train_denoiser(&config, &bundle, optimizer, seed)?;
        let outcome = run_eval(&model, eval_scenarios, eval_responses, settings)?;
        rows.push(AblationRow {
            use_tse: tse,
            use_caf: caf,
            use_cap: cap,
            use_bfc: bfc,
            l2_avg: outcome.sampled.l2_avg,
            coll_avg: outcome.sampled.coll_avg,
        });
    }
    Ok(rows)
}
