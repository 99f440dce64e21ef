//! Acceptance suite: one test per criterion, each printing a PASS line
//! with its measured runtime. Run with `cargo test --test acceptance --
//! --nocapture` to see the lines.

use std::time::Instant;

use diffplan_core::denoiser::{grad_check, DenoiserConfig, OptimizerConfig};
use diffplan_core::diffusion::{
    forward_noise, make_schedule, reverse_step, sample, DenoiseError, DenoiseModel,
    ReverseTimeGrid, Standardizer,
};
use diffplan_core::eval::{
    ablation_run, run_eval, boxes_intersect, boxes_overlap_margin, CollisionMode, EvalSettings,
    L2Mode,
};
use diffplan_core::pipeline::{
    align_responses, build_training_set, train_denoiser, ReverseGridConfig, ScheduleConfig,
};
use diffplan_core::proposer::{propose, ContextEmbedding, ResponseRecord, StructuredResponse};
use diffplan_core::rng::{derive_seed, rng_from_seed};
use diffplan_core::scene::{
    generate_scenario, ground_truth_path, BevGrid, GridConfig, OrientedBox, Path, Scenario,
    ScenarioConfig, Waypoint,
};
use diffplan_core::stats::{
    extract_noise, fit_noise_model, kolmogorov_sf, ks_statistic, pool_noise,
    report_from_verdicts, std_normal_cdf, verify_paths, DecisionRule, NoiseModel, NoiseSamples,
    ReferenceMode,
};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Reference Kolmogorov survival: plain 500-term alternating sum.
fn kolmogorov_sf_reference(t: f64) -> f64 {
    let mut sum = 0.0;
    for k in 1..=500u32 {
        let term = (-2.0 * (k * k) as f64 * t * t).exp();
        sum += if k % 2 == 1 { term } else { -term };
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Dense-grid KS oracle: |F_n - F| on 1e5 grid points plus the sample
/// points and their left neighbors, with F_n by counting.
fn ks_oracle(samples: &[f64], mean: f64, std: f64) -> f64 {
    let n = samples.len() as f64;
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let lo = sorted[0] - 3.0 * std;
    let hi = sorted[sorted.len() - 1] + 3.0 * std;
    let mut points: Vec<f64> = (0..100_000)
        .map(|i| lo + (hi - lo) * i as f64 / 99_999.0)
        .collect();
    let next_below = |v: f64| -> f64 {
        if v > 0.0 {
            f64::from_bits(v.to_bits() - 1)
        } else if v < 0.0 {
            f64::from_bits(v.to_bits() + 1)
        } else {
            -f64::MIN_POSITIVE
        }
    };
    for &s in &sorted {
        points.push(s);
        points.push(next_below(s));
    }
    let mut d = 0.0f64;
    for &x in &points {
        let below = sorted.partition_point(|&s| s <= x) as f64;
        let gap = (below / n - std_normal_cdf((x - mean) / std)).abs();
        d = d.max(gap);
    }
    d
}

#[test]
fn acceptance_1_ks_oracle_equivalence() {
    let start = Instant::now();

    for i in 0..50 {
        let t = 0.2 + 4.8 * i as f64 / 49.0;
        let frozen = kolmogorov_sf(t).unwrap();
        let reference = kolmogorov_sf_reference(t);
        assert!(
            (frozen - reference).abs() < 1e-10,
            "t = {t}: {frozen} vs {reference}"
        );
    }

    let mut rng = rng_from_seed(0xacce_0001);
    for trial in 0..100 {
        let n = rng.gen_range(3..200);
        let mean = rng.gen_range(-1.0..1.0);
        let std = rng.gen_range(0.2..2.0);
        let normal = Normal::new(mean, std).unwrap();
        let samples: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
        let fast = ks_statistic(&samples, mean, std).unwrap();
        let slow = ks_oracle(&samples, mean, std);
        assert!((fast - slow).abs() < 1e-6, "trial {trial}: {fast} vs {slow}");
    }

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 10.0, "took {elapsed:?}");
    println!("acceptance 1 (KS oracle equivalence): PASS ({elapsed:?})");
}

/// 2,000 mock paths with residuals drawn per coordinate, pooled in groups
/// of 8 paths x 8 waypoints = 64 samples per coordinate, verified against
/// the dataset-fitted noise model with one combined KS decision per group.
fn pooled_pass_percentage(residuals: impl Fn(&mut rand_chacha::ChaCha8Rng) -> f64) -> f64 {
    let mut rng = rng_from_seed(0xacce_0002);
    let n_paths = 2000;
    let waypoints = 8;
    let mut noise = Vec::with_capacity(n_paths);
    for _ in 0..n_paths {
        noise.push(NoiseSamples {
            residual_x: (0..waypoints).map(|_| residuals(&mut rng)).collect(),
            residual_y: (0..waypoints).map(|_| residuals(&mut rng)).collect(),
        });
    }
    let fitted = fit_noise_model(&noise).unwrap();
    let pooled = pool_noise(&noise, 8);
    assert_eq!(pooled.len(), 250);
    assert_eq!(pooled[0].len(), 64);
    let verdicts = verify_paths(
        &pooled,
        0.05,
        ReferenceMode::Fitted(fitted),
        DecisionRule::Combined,
    );
    report_from_verdicts(&verdicts).unwrap().pass_percentage
}

#[test]
fn acceptance_2_table_one_analog() {
    let start = Instant::now();

    let gauss_dist = Normal::new(0.0, 0.5).unwrap();
    let gauss = pooled_pass_percentage(|rng| gauss_dist.sample(rng));
    assert!(
        (92.0..=98.0).contains(&gauss),
        "gaussian pass percentage {gauss}"
    );

    let uniform = pooled_pass_percentage(|rng| rng.gen_range(-0.866..0.866));
    assert!(
        gauss - uniform >= 20.0,
        "uniform {uniform} not 20 points below gaussian {gauss}"
    );

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 30.0, "took {elapsed:?}");
    println!(
        "acceptance 2 (Table-I analog): PASS (gaussian {gauss:.2}%, uniform {uniform:.2}%, {elapsed:?})"
    );
}

struct TargetOracle {
    target: Path,
    standardizer: Standardizer,
}

impl DenoiseModel for TargetOracle {
    fn predict(
        &self,
        _noisy: &Path,
        _bev: &BevGrid,
        _context: &ContextEmbedding,
        _t: f64,
    ) -> Result<Path, DenoiseError> {
        Ok(self.target.clone())
    }
    fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }
}

#[test]
fn acceptance_3_forward_reverse_contracts() {
    let start = Instant::now();

    // Zero-noise forward reduces to pure sqrt(alpha_bar) scaling, bitwise.
    let gt = ground_truth_path(2.3, 0.07, 6, 0.5).unwrap();
    let schedule = make_schedule(100, 1e-4, 0.02).unwrap();
    for i in 0..schedule.steps() {
        let noised = forward_noise(&gt, i, &schedule, &NoiseModel::zero(), 9).unwrap();
        let scale = schedule.alpha_bars[i].sqrt();
        for (n, g) in noised.waypoints.iter().zip(&gt.waypoints) {
            assert_eq!(n.x.to_bits(), (scale * g.x).to_bits());
            assert_eq!(n.y.to_bits(), (scale * g.y).to_bits());
        }
    }

    // Reverse step: fixed point, h -> 0 limit, and the ln 2 half-step.
    let other = ground_truth_path(3.1, -0.05, 6, 0.5).unwrap();
    let fixed = reverse_step(&gt, &gt, 0.0, 0.7).unwrap();
    for (a, b) in fixed.waypoints.iter().zip(&gt.waypoints) {
        assert!((a.x - b.x).abs() < 1e-12 && (a.y - b.y).abs() < 1e-12);
    }
    let near = reverse_step(&gt, &other, 1.0, 1.0 + 1e-13).unwrap();
    for (a, b) in near.waypoints.iter().zip(&gt.waypoints) {
        assert!((a.x - b.x).abs() < 1e-12 && (a.y - b.y).abs() < 1e-12);
    }
    let noisy = Path {
        dt: 0.5,
        waypoints: vec![Waypoint::new(1.0, 0.0); 6],
    };
    let prediction = Path {
        dt: 0.5,
        waypoints: vec![Waypoint::new(0.0, 0.0); 6],
    };
    let half = reverse_step(&noisy, &prediction, 0.0, 2f64.ln()).unwrap();
    for w in &half.waypoints {
        assert!((w.x - 0.5).abs() < 1e-12 && w.y.abs() < 1e-12);
    }

    // Oracle-denoiser sampling contracts by exp(-sum h).
    let grid = ReverseTimeGrid::uniform(10, 0.0, 3.0).unwrap();
    let oracle = TargetOracle {
        target: gt.clone(),
        standardizer: Standardizer::identity(),
    };
    let bev = BevGrid::zeros(&GridConfig::default());
    let ctx = ContextEmbedding {
        tokens: vec![vec![0.0; 8]],
    };
    let out = sample(&oracle, &bev, &ctx, &other, &grid).unwrap();
    let inf = |a: &Path, b: &Path| -> f64 {
        a.waypoints
            .iter()
            .zip(&b.waypoints)
            .map(|(x, y)| (x.x - y.x).abs().max((x.y - y.y).abs()))
            .fold(0.0f64, f64::max)
    };
    assert!(inf(&out, &gt) <= grid.contraction() * inf(&other, &gt) + 1e-9);

    let elapsed = start.elapsed();
    println!("acceptance 3 (forward/reverse contracts): PASS ({elapsed:?})");
}

#[test]
fn acceptance_4_gradient_correctness() {
    let start = Instant::now();
    let err = grad_check(&DenoiserConfig::default(), 1e-5, 220).unwrap();
    assert!(err < 1e-4, "max relative error {err}");
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 60.0, "took {elapsed:?}");
    println!("acceptance 4 (gradient correctness): PASS (max rel err {err:.2e}, {elapsed:?})");
}

fn mock_world(
    seeds: std::ops::Range<u64>,
    cfg: &ScenarioConfig,
    noise: &NoiseModel,
    tag: u64,
) -> (Vec<Scenario>, Vec<ResponseRecord>, Vec<StructuredResponse>) {
    let scenarios: Vec<Scenario> = seeds.map(|s| generate_scenario(s, cfg).unwrap()).collect();
    let records: Vec<ResponseRecord> = scenarios
        .iter()
        .map(|s| {
            ResponseRecord::new(
                s.id.clone(),
                propose(s, noise, derive_seed(tag, s.seed)).unwrap(),
            )
        })
        .collect();
    let responses = align_responses(&scenarios, &records).unwrap();
    (scenarios, records, responses)
}

#[test]
fn acceptance_5_end_to_end_desk_scale() {
    let start = Instant::now();
    let cfg = ScenarioConfig::default();
    let mock_noise = NoiseModel::isotropic(0.5);

    // 2,000 training scenarios with mock proposals (std 0.5 m).
    let (train_scenarios, _, train_responses) = mock_world(0..2000, &cfg, &mock_noise, 0xa5);
    // Fit the noise model from the proposals themselves.
    let proposals: Vec<Path> = train_responses
        .iter()
        .map(|r| r.proposed_path.clone())
        .collect();
    let gts: Vec<Path> = train_scenarios.iter().map(|s| s.gt_path.clone()).collect();
    let residuals = extract_noise(&proposals, &gts).unwrap();
    let noise_model = fit_noise_model(&residuals).unwrap();
    assert!((noise_model.std_x - 0.5).abs() < 0.02);

    let denoiser_config = DenoiserConfig::default();
    let optimizer = OptimizerConfig {
        steps: 2500,
        batch_size: 32,
        ..Default::default()
    };
    assert!(optimizer.steps <= 20_000);
    let bundle = build_training_set(
        &train_scenarios,
        &train_responses,
        &noise_model,
        &GridConfig::default(),
        &ScheduleConfig::default(),
        denoiser_config.d_model,
        42,
        optimizer.examples_per_scenario,
        7,
    )
    .unwrap();
    let model = train_denoiser(&denoiser_config, &bundle, &optimizer, 7).unwrap();
    drop(bundle);

    // 500 held-out scenarios.
    let (eval_scenarios, _, eval_responses) = mock_world(100_000..100_500, &cfg, &mock_noise, 0xe7);
    let settings = EvalSettings {
        grid: GridConfig::default(),
        reverse: ReverseGridConfig::default(),
        table_seed: 42,
        d_model: denoiser_config.d_model,
        l2_mode: L2Mode::Avg,
        collision_mode: CollisionMode::Scenario,
    };
    let outcome = run_eval(&model, &eval_scenarios, &eval_responses, &settings).unwrap();

    let elapsed = start.elapsed();
    assert!(
        outcome.sampled.l2_avg <= 0.7 * outcome.proposal.l2_avg,
        "sampled L2 {} vs proposal {} (needs at least 30% below)",
        outcome.sampled.l2_avg,
        outcome.proposal.l2_avg
    );
    assert!(
        outcome.sampled.coll_avg <= outcome.proposal.coll_avg,
        "sampled collision {} vs proposal {}",
        outcome.sampled.coll_avg,
        outcome.proposal.coll_avg
    );
    assert!(elapsed.as_secs_f64() <= 900.0, "took {elapsed:?}");
    println!(
        "acceptance 5 (end-to-end desk scale): PASS (sampled L2 {:.3} vs proposal {:.3}, collision {:.2}% vs {:.2}%, {elapsed:?})",
        outcome.sampled.l2_avg,
        outcome.proposal.l2_avg,
        outcome.sampled.coll_avg,
        outcome.proposal.coll_avg
    );
}

#[test]
fn acceptance_6_ablation_direction() {
    let start = Instant::now();
    let cfg = ScenarioConfig::default();
    let mock_noise = NoiseModel::isotropic(0.5);
    let (train_scenarios, _, train_responses) = mock_world(0..250, &cfg, &mock_noise, 0xab1);
    let (eval_scenarios, _, eval_responses) =
        mock_world(20_000..20_250, &cfg, &mock_noise, 0xab2);

    let proposals: Vec<Path> = train_responses
        .iter()
        .map(|r| r.proposed_path.clone())
        .collect();
    let gts: Vec<Path> = train_scenarios.iter().map(|s| s.gt_path.clone()).collect();
    let noise_model = fit_noise_model(&extract_noise(&proposals, &gts).unwrap()).unwrap();

    let base = DenoiserConfig::default();
    let optimizer = OptimizerConfig {
        steps: 800,
        batch_size: 32,
        ..Default::default()
    };
    let settings = EvalSettings {
        grid: GridConfig::default(),
        reverse: ReverseGridConfig::default(),
        table_seed: 42,
        d_model: base.d_model,
        l2_mode: L2Mode::Avg,
        collision_mode: CollisionMode::Scenario,
    };
    let combos = [[true, true, true, true], [false, true, true, true]];
    let mut all_flags = Vec::new();
    let mut no_tse = Vec::new();
    for seed in [1u64, 2, 3] {
        let rows = ablation_run(
            &base,
            &combos,
            &train_scenarios,
            &train_responses,
            &eval_scenarios,
            &eval_responses,
            &noise_model,
            &ScheduleConfig::default(),
            &optimizer,
            &settings,
            seed,
        )
        .unwrap();
        all_flags.push(rows[0].l2_avg);
        no_tse.push(rows[1].l2_avg);
    }
    all_flags.sort_by(f64::total_cmp);
    no_tse.sort_by(f64::total_cmp);
    let elapsed = start.elapsed();
    assert!(
        all_flags[1] <= no_tse[1],
        "median all-flags {} vs no-TSE {} over seeds 1..3 ({all_flags:?} vs {no_tse:?})",
        all_flags[1],
        no_tse[1]
    );
    println!(
        "acceptance 6 (ablation direction): PASS (median all-flags {:.4} <= no-TSE {:.4}, {elapsed:?})",
        all_flags[1], no_tse[1]
    );
}

/// Point-sampling oracle for box intersection: corner-inclusive sample
/// grids over both boxes, closed containment tests both directions.
fn boxes_intersect_oracle(a: &OrientedBox, b: &OrientedBox, samples: usize) -> bool {
    let covers = |outer: &OrientedBox, inner: &OrientedBox| -> bool {
        let (s, c) = inner.heading.sin_cos();
        for i in 0..samples {
            let fx = i as f64 / (samples - 1) as f64 - 0.5;
            for j in 0..samples {
                let fy = j as f64 / (samples - 1) as f64 - 0.5;
                let lx = fx * inner.length;
                let ly = fy * inner.width;
                if outer.contains(inner.cx + lx * c - ly * s, inner.cy + lx * s + ly * c) {
                    return true;
                }
            }
        }
        false
    };
    covers(b, a) || covers(a, b)
}

#[test]
fn acceptance_7_collision_checker_equivalence() {
    let start = Instant::now();
    let mut rng = rng_from_seed(0xacce_0007);
    let mut compared = 0usize;
    let mut agreements = 0usize;
    for _ in 0..1000 {
        let a = OrientedBox::new(
            rng.gen_range(-4.0..4.0),
            rng.gen_range(-4.0..4.0),
            rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
            rng.gen_range(0.5..4.0),
            rng.gen_range(0.5..3.0),
        );
        let b = OrientedBox::new(
            rng.gen_range(-4.0..4.0),
            rng.gen_range(-4.0..4.0),
            rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
            rng.gen_range(0.5..4.0),
            rng.gen_range(0.5..3.0),
        );
        // Knife-edge band: skip pairs within 1e-6 of exact touching.
        if boxes_overlap_margin(&a, &b).abs() < 1e-6 {
            continue;
        }
        compared += 1;
        agreements +=
            (boxes_intersect(&a, &b) == boxes_intersect_oracle(&a, &b, 200)) as usize;
    }
    let elapsed = start.elapsed();
    assert!(compared >= 990, "only {compared} pairs outside the band");
    assert_eq!(agreements, compared, "disagreements outside 1e-6 band");
    println!(
        "acceptance 7 (collision checker equivalence): PASS ({agreements}/{compared} agree, {elapsed:?})"
    );
}

/// Criterion 8 (CLI determinism) lives in the CLI crate's acceptance
/// suite, next to the binary it exercises.
#[test]
fn acceptance_8_pointer() {
    println!("acceptance 8 (CLI determinism): see diffplan-cli tests/acceptance.rs");
}
