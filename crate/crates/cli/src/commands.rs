//! Subcommand implementations. Every stage is a pure function of its
//! input files, the config, and the seed, so re-runs are byte-identical.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use diffplan_core::denoiser::Denoiser;
use diffplan_core::diffusion::{
    sample, standardize, DenoiseError, DenoiseModel, ReverseTimeGrid, Standardizer,
};
use diffplan_core::eval::{run_eval, EvalSettings};
use diffplan_core::pipeline::{
    align_responses, build_training_set, train_denoiser_with_curve, PipelineError,
};
use diffplan_core::proposer::{propose, ResponseRecord, StructuredResponse};
use diffplan_core::rng::derive_seed;
use diffplan_core::scene::{generate_scenario, rasterize_bev, Path as PlanPath, Scenario};
use diffplan_core::stats::{
    extract_noise, fit_noise_model, pool_noise, report_from_verdicts, verify_paths, DecisionRule,
    NoiseModel, ReferenceMode,
};
use diffplan_core::svg::scenario_overlay;
use serde::Serialize;

use crate::config::RunConfig;
use crate::io;
use crate::CliError;

const PROPOSE_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;
const EVAL_PROPOSE_STREAM: u64 = 3;
const ABLATE_STREAM: u64 = 4;

fn map_pipeline(e: PipelineError) -> CliError {
    match e {
        PipelineError::Alignment(m) => CliError::Data(m),
        PipelineError::Scene(e) => CliError::Config(e.to_string()),
        other => CliError::Runtime(other.to_string()),
    }
}

/// `gen`: write `count` seeded scenarios as JSON Lines.
pub fn cmd_gen(config: &RunConfig, count: usize, out: &Path) -> Result<(), CliError> {
    config
        .scenario
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let scenarios: Result<Vec<Scenario>, _> = (0..count)
        .map(|i| generate_scenario(config.seed.wrapping_add(i as u64), &config.scenario))
        .collect();
    let scenarios = scenarios.map_err(|e| CliError::Config(e.to_string()))?;
    io::write_scenarios(out, &scenarios)
}

fn load_noise_model(path: Option<&Path>, config: &RunConfig) -> Result<NoiseModel, CliError> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| {
                CliError::Config(format!("cannot read noise model {}: {e}", p.display()))
            })?;
            let model: NoiseModel = serde_json::from_str(&text)
                .map_err(|e| CliError::Data(format!("noise model {}: {e}", p.display())))?;
            model
                .validate()
                .map_err(|e| CliError::Data(e.to_string()))?;
            Ok(model)
        }
        None => Ok(config.noise.to_model()),
    }
}

fn mock_responses(
    scenarios: &[Scenario],
    noise: &NoiseModel,
    stage_seed: u64,
) -> Result<Vec<ResponseRecord>, CliError> {
    scenarios
        .iter()
        .map(|s| {
            propose(s, noise, derive_seed(stage_seed, s.seed))
                .map(|r| ResponseRecord::new(s.id.clone(), r))
                .map_err(|e| CliError::Runtime(e.to_string()))
        })
        .collect()
}

/// `propose`: mock structured responses for each scenario, or re-emit a
/// recorded response file in normalized form with `--parse`.
pub fn cmd_propose(
    config: &RunConfig,
    scenarios_path: &Path,
    out: &Path,
    noise_path: Option<&Path>,
    parse_path: Option<&Path>,
) -> Result<(), CliError> {
    let scenarios = io::read_scenarios(scenarios_path)?;
    let records = match parse_path {
        Some(p) => {
            let records = io::read_responses(p, config.scenario.horizon)?;
            // Validate alignment before re-emitting.
            align_responses(&scenarios, &records).map_err(map_pipeline)?;
            records
        }
        None => {
            let noise = load_noise_model(noise_path, config)?;
            mock_responses(&scenarios, &noise, derive_seed(config.seed, PROPOSE_STREAM))?
        }
    };
    io::write_responses(out, &records)
}

fn aligned_noise(
    scenarios: &[Scenario],
    records: &[ResponseRecord],
) -> Result<Vec<diffplan_core::stats::NoiseSamples>, CliError> {
    let responses = align_responses(scenarios, records).map_err(map_pipeline)?;
    let proposals: Vec<PlanPath> = responses.into_iter().map(|r| r.proposed_path).collect();
    let gts: Vec<PlanPath> = scenarios.iter().map(|s| s.gt_path.clone()).collect();
    extract_noise(&proposals, &gts).map_err(|e| CliError::Data(e.to_string()))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `ks-verify`: per-path (or pooled) KS normality verification CSV.
///
/// With `--pool 1` each path is tested per coordinate against its own
/// mean/std and passes only if both coordinates do. With pooling the
/// default switches to the fitted-reference combined test: groups are
/// standardized by the dataset-level noise model and one KS decision is
/// made per group.
#[allow(clippy::too_many_arguments)]
pub fn cmd_ks_verify(
    config: &RunConfig,
    responses_path: &Path,
    scenarios_path: &Path,
    out: &Path,
    pool: usize,
    reference: Option<&str>,
    rule: Option<&str>,
) -> Result<(), CliError> {
    if pool == 0 {
        return Err(CliError::Config("--pool must be >= 1".into()));
    }
    let scenarios = io::read_scenarios(scenarios_path)?;
    let records = io::read_responses(responses_path, config.scenario.horizon)?;
    let noise = aligned_noise(&scenarios, &records)?;

    let fitted = fit_noise_model(&noise).map_err(|e| CliError::Data(e.to_string()))?;
    let pooled = if pool > 1 {
        pool_noise(&noise, pool)
    } else {
        noise
    };

    let reference_mode = match reference.unwrap_or(if pool > 1 { "fitted" } else { "per-path" }) {
        "per-path" => ReferenceMode::PerSequence,
        "fitted" => ReferenceMode::Fitted(fitted),
        other => {
            return Err(CliError::Config(format!(
                "--reference must be per-path or fitted, got \"{other}\""
            )))
        }
    };
    let decision = match rule.unwrap_or(if pool > 1 { "combined" } else { "and" }) {
        "and" => DecisionRule::PerCoordinateAnd,
        "combined" => DecisionRule::Combined,
        other => {
            return Err(CliError::Config(format!(
                "--rule must be and or combined, got \"{other}\""
            )))
        }
    };
    if decision == DecisionRule::Combined && matches!(reference_mode, ReferenceMode::PerSequence) {
        return Err(CliError::Config(
            "--rule combined requires --reference fitted".into(),
        ));
    }

    let verdicts = verify_paths(&pooled, config.alpha, reference_mode, decision);
    let report = report_from_verdicts(&verdicts).map_err(|e| CliError::Data(e.to_string()))?;

    let mut csv = String::from("path_id,n,d_x,p_x,d_y,p_y,passed\n");
    for (i, v) in verdicts.iter().enumerate() {
        let id = if pool > 1 {
            format!("pool-{i:06}")
        } else {
            scenarios[i].id.clone()
        };
        let _ = writeln!(
            csv,
            "{id},{},{},{},{},{},{}",
            v.n,
            fmt_opt(v.x.map(|k| k.d_n)),
            fmt_opt(v.x.map(|k| k.p_value)),
            fmt_opt(v.y.map(|k| k.d_n)),
            fmt_opt(v.y.map(|k| k.p_value)),
            v.passed
        );
    }
    let _ = writeln!(
        csv,
        "summary,{},{},{},,,",
        report.total_paths, report.passed_paths, report.pass_percentage
    );
    io::write_text(out, &csv)
}

/// `fit-noise`: pooled Gaussian residual model as JSON.
pub fn cmd_fit_noise(
    config: &RunConfig,
    responses_path: &Path,
    scenarios_path: &Path,
    out: &Path,
) -> Result<(), CliError> {
    let scenarios = io::read_scenarios(scenarios_path)?;
    let records = io::read_responses(responses_path, config.scenario.horizon)?;
    let noise = aligned_noise(&scenarios, &records)?;
    let model = fit_noise_model(&noise).map_err(|e| CliError::Data(e.to_string()))?;
    io::write_text(
        out,
        &format!(
            "{}\n",
            serde_json::to_string(&model).expect("noise model serializes")
        ),
    )
}

/// `train`: fit the noise model from responses, build the noised training
/// set, train the denoiser, and write the model artifact plus loss curve.
#[allow(clippy::too_many_arguments)]
pub fn cmd_train(
    config: &RunConfig,
    scenarios_path: &Path,
    responses_path: &Path,
    out_model: &Path,
    loss_curve: Option<&Path>,
    dataset_cache: Option<&Path>,
) -> Result<(), CliError> {
    let scenarios = io::read_scenarios(scenarios_path)?;
    let records = io::read_responses(responses_path, config.scenario.horizon)?;
    let responses = align_responses(&scenarios, &records).map_err(map_pipeline)?;
    let noise = aligned_noise(&scenarios, &records)?;
    let noise_model = fit_noise_model(&noise).map_err(|e| CliError::Data(e.to_string()))?;

    let denoiser_config = config.denoiser_config();
    let bundle = build_training_set(
        &scenarios,
        &responses,
        &noise_model,
        &config.grid,
        &config.schedule,
        denoiser_config.d_model,
        config.table_seed,
        config.optimizer.examples_per_scenario,
        derive_seed(config.seed, TRAIN_STREAM),
    )
    .map_err(map_pipeline)?;

    let (model, curve) = train_denoiser_with_curve(
        &denoiser_config,
        &bundle,
        &config.optimizer,
        derive_seed(config.seed, TRAIN_STREAM),
    )
    .map_err(map_pipeline)?;

    model
        .save(out_model)
        .map_err(|e| CliError::Artifact(e.to_string()))?;

    if let Some(path) = loss_curve {
        let mut csv = String::from("step,waypoint_mse,cumsum_mse,total\n");
        for p in &curve {
            let _ = writeln!(csv, "{},{},{},{}", p.step, p.waypoint_mse, p.cumsum_mse, p.total);
        }
        io::write_text(path, &csv)?;
    }
    if let Some(path) = dataset_cache {
        let mut lines = String::new();
        for r in &bundle.refs {
            let _ = writeln!(
                lines,
                "{}",
                serde_json::to_string(r).expect("example refs serialize")
            );
        }
        io::write_text(path, &lines)?;
    }
    Ok(())
}

/// Denoiser standing in for a trained model: predicts its input
/// unchanged. With clean proposals the whole sampling pipeline is then
/// the identity, which makes wiring failures visible as nonzero L2.
struct IdentityDenoiser {
    standardizer: Standardizer,
}

impl DenoiseModel for IdentityDenoiser {
    fn predict(
        &self,
        noisy: &PlanPath,
        _bev: &diffplan_core::scene::BevGrid,
        _context: &diffplan_core::proposer::ContextEmbedding,
        _t: f64,
    ) -> Result<PlanPath, DenoiseError> {
        Ok(noisy.clone())
    }
    fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }
}

enum LoadedModel {
    Trained(Box<Denoiser>),
    Identity(IdentityDenoiser),
}

impl LoadedModel {
    fn as_model(&self) -> &(dyn DenoiseModel + Sync) {
        match self {
            LoadedModel::Trained(m) => m.as_ref(),
            LoadedModel::Identity(m) => m,
        }
    }

    fn d_model(&self, config: &RunConfig) -> usize {
        match self {
            LoadedModel::Trained(m) => m.config().d_model,
            LoadedModel::Identity(_) => config.denoiser.d_model,
        }
    }
}

fn load_model(path: Option<&Path>, oracle: bool) -> Result<LoadedModel, CliError> {
    if oracle {
        return Ok(LoadedModel::Identity(IdentityDenoiser {
            standardizer: Standardizer::identity(),
        }));
    }
    let path = path.ok_or_else(|| {
        CliError::Config("--model is required unless --oracle-denoiser is set".into())
    })?;
    let model = Denoiser::load(path).map_err(|e| CliError::Artifact(e.to_string()))?;
    Ok(LoadedModel::Trained(Box::new(model)))
}

fn eval_responses(
    config: &RunConfig,
    scenarios: &[Scenario],
    responses_path: Option<&Path>,
    stage: u64,
) -> Result<Vec<StructuredResponse>, CliError> {
    match responses_path {
        Some(p) => {
            let records = io::read_responses(p, config.scenario.horizon)?;
            align_responses(scenarios, &records).map_err(map_pipeline)
        }
        None => {
            let noise = config.noise.to_model();
            let records =
                mock_responses(scenarios, &noise, derive_seed(config.seed, stage))?;
            align_responses(scenarios, &records).map_err(map_pipeline)
        }
    }
}

#[derive(Serialize)]
struct SampledLine<'a> {
    scenario_id: &'a str,
    path: &'a PlanPath,
}

/// `sample`: denoise each scenario's proposal and write the sampled paths.
pub fn cmd_sample(
    config: &RunConfig,
    model_path: Option<&Path>,
    scenarios_path: &Path,
    responses_path: Option<&Path>,
    out: &Path,
    oracle: bool,
) -> Result<(), CliError> {
    let model = load_model(model_path, oracle)?;
    let scenarios = io::read_scenarios(scenarios_path)?;
    let responses = eval_responses(config, &scenarios, responses_path, EVAL_PROPOSE_STREAM)?;
    let encoder = diffplan_core::proposer::ContextEncoder::new(
        config.table_seed,
        model.d_model(config),
    );
    let grid = ReverseTimeGrid::uniform(
        config.reverse.intervals,
        config.reverse.t_start,
        config.reverse.t_end,
    )
    .map_err(|e| CliError::Config(e.to_string()))?;

    let mut lines = String::new();
    for (scenario, response) in scenarios.iter().zip(&responses) {
        let bev = rasterize_bev(scenario, &config.grid)
            .map_err(|e| CliError::Config(e.to_string()))?;
        let context = encoder.encode(response);
        let start = standardize(&response.proposed_path, model.as_model().standardizer());
        let sampled = sample(model.as_model(), &bev, &context, &start, &grid)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        let _ = writeln!(
            lines,
            "{}",
            serde_json::to_string(&SampledLine {
                scenario_id: &scenario.id,
                path: &sampled,
            })
            .expect("sampled lines serialize")
        );
    }
    io::write_text(out, &lines)
}

fn eval_settings(config: &RunConfig, d_model: usize) -> EvalSettings {
    EvalSettings {
        grid: config.grid,
        reverse: config.reverse,
        table_seed: config.table_seed,
        d_model,
        l2_mode: config.l2_mode,
        collision_mode: config.collision_mode,
    }
}

fn report_csv(outcome: &diffplan_core::eval::EvalOutcome) -> String {
    let mut csv = String::from(
        "row,l2_1s,l2_2s,l2_3s,l2_avg,coll_1s,coll_2s,coll_3s,coll_avg,scenarios\n",
    );
    for (name, r) in [
        ("sampled", &outcome.sampled),
        ("proposal", &outcome.proposal),
    ] {
        let _ = writeln!(
            csv,
            "{name},{},{},{},{},{},{},{},{},{}",
            r.l2_1s,
            r.l2_2s,
            r.l2_3s,
            r.l2_avg,
            r.coll_1s,
            r.coll_2s,
            r.coll_3s,
            r.coll_avg,
            r.scenario_count
        );
    }
    csv
}

/// `eval`: open-loop metrics for sampled paths and raw proposals.
#[allow(clippy::too_many_arguments)]
pub fn cmd_eval(
    config: &RunConfig,
    model_path: Option<&Path>,
    scenarios_path: &Path,
    responses_path: Option<&Path>,
    out: &Path,
    svg_dir: Option<&Path>,
    oracle: bool,
) -> Result<(), CliError> {
    let model = load_model(model_path, oracle)?;
    let scenarios = io::read_scenarios(scenarios_path)?;
    let responses = eval_responses(config, &scenarios, responses_path, EVAL_PROPOSE_STREAM)?;
    let settings = eval_settings(config, model.d_model(config));
    let outcome = run_eval(model.as_model(), &scenarios, &responses, &settings)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    io::write_text(out, &report_csv(&outcome))?;

    if let Some(dir) = svg_dir {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Config(format!("cannot create {}: {e}", dir.display())))?;
        for (scenario, per) in scenarios.iter().zip(&outcome.per_scenario) {
            let svg = scenario_overlay(scenario, &per.proposal, &per.sampled);
            io::write_text(&dir.join(format!("{}.svg", scenario.id)), &svg)?;
        }
    }
    Ok(())
}

fn parse_flag_combo(token: &str) -> Result<[bool; 4], CliError> {
    match token {
        "all" => Ok([true, true, true, true]),
        "no-tse" => Ok([false, true, true, true]),
        "no-caf" => Ok([true, false, true, true]),
        "no-cap" => Ok([true, true, false, true]),
        "no-bfc" => Ok([true, true, true, false]),
        "none" => Ok([false, false, false, false]),
        other => Err(CliError::Config(format!(
            "unknown ablation row \"{other}\" (expected all, no-tse, no-caf, no-cap, no-bfc, none)"
        ))),
    }
}

/// `ablate`: one trained-and-evaluated row per requested flag set, on
/// identical data and seeds.
#[allow(clippy::too_many_arguments)]
pub fn cmd_ablate(
    config: &RunConfig,
    scenarios_path: &Path,
    eval_scenarios_path: Option<&Path>,
    responses_path: Option<&Path>,
    flags: &str,
    out: &Path,
) -> Result<(), CliError> {
    let combos: Result<Vec<[bool; 4]>, _> = flags
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(parse_flag_combo)
        .collect();
    let combos = combos?;
    if combos.is_empty() {
        return Err(CliError::Config("--flags must name at least one row".into()));
    }

    let train_scenarios = io::read_scenarios(scenarios_path)?;
    let eval_scenarios = match eval_scenarios_path {
        Some(p) => io::read_scenarios(p)?,
        None => train_scenarios.clone(),
    };

    let noise = config.noise.to_model();
    let train_responses = match responses_path {
        Some(p) => {
            let records = io::read_responses(p, config.scenario.horizon)?;
            align_responses(&train_scenarios, &records).map_err(map_pipeline)?
        }
        None => {
            let records = mock_responses(
                &train_scenarios,
                &noise,
                derive_seed(config.seed, PROPOSE_STREAM),
            )?;
            align_responses(&train_scenarios, &records).map_err(map_pipeline)?
        }
    };
    let eval_records = mock_responses(
        &eval_scenarios,
        &noise,
        derive_seed(config.seed, ABLATE_STREAM),
    )?;
    let eval_responses_aligned =
        align_responses(&eval_scenarios, &eval_records).map_err(map_pipeline)?;

    let proposals: Vec<PlanPath> = train_responses
        .iter()
        .map(|r| r.proposed_path.clone())
        .collect();
    let gts: Vec<PlanPath> = train_scenarios.iter().map(|s| s.gt_path.clone()).collect();
    let residuals = extract_noise(&proposals, &gts).map_err(|e| CliError::Data(e.to_string()))?;
    let noise_model = fit_noise_model(&residuals).map_err(|e| CliError::Data(e.to_string()))?;

    let denoiser_config = config.denoiser_config();
    let settings = eval_settings(config, denoiser_config.d_model);
    let rows = diffplan_core::eval::ablation_run(
        &denoiser_config,
        &combos,
        &train_scenarios,
        &train_responses,
        &eval_scenarios,
        &eval_responses_aligned,
        &noise_model,
        &config.schedule,
        &config.optimizer,
        &settings,
        derive_seed(config.seed, TRAIN_STREAM),
    )
    .map_err(|e| CliError::Runtime(e.to_string()))?;

    let mut csv = String::from("tse,caf,cap,bfc,l2_avg,coll_avg\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            r.use_tse, r.use_caf, r.use_cap, r.use_bfc, r.l2_avg, r.coll_avg
        );
    }
    io::write_text(out, &csv)
}

/// Shared output path helper for commands that default filenames.
pub fn default_sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "out".to_string());
    name.push_str(suffix);
    path.with_file_name(name)
}
