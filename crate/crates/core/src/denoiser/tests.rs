use super::*;
use crate::diffusion::{Standardizer, TrainingExample};
use crate::proposer::ContextEmbedding;
use crate::rng::rng_from_seed;
use crate::scene::{BevGrid, GridConfig, Path, Waypoint};
use rand::Rng;

fn test_grid_config(config: &DenoiserConfig) -> GridConfig {
    GridConfig {
        channels: config.bev_channels,
        height: config.bev_tokens[0] * 4,
        width: config.bev_tokens[1] * 4,
        resolution: 0.5,
    }
}

fn random_grid(seed: u64, cfg: &GridConfig) -> BevGrid {
    let mut rng = rng_from_seed(seed);
    let mut g = BevGrid::zeros(cfg);
    for v in &mut g.data {
        *v = rng.gen_range(0.0..1.0);
    }
    g
}

fn random_context(seed: u64, tokens: usize, d: usize) -> ContextEmbedding {
    let mut rng = rng_from_seed(seed);
    ContextEmbedding {
        tokens: (0..tokens)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect(),
    }
}

fn random_path(seed: u64, n: usize) -> Path {
    let mut rng = rng_from_seed(seed);
    Path {
        dt: 0.5,
        waypoints: (0..n)
            .map(|_| Waypoint::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)))
            .collect(),
    }
}

fn small_config() -> DenoiserConfig {
    DenoiserConfig {
        d_model: 16,
        layers: 1,
        heads: 2,
        bev_tokens: [2, 2],
        bev_channels: 3,
        horizon: 6,
        ..Default::default()
    }
}

#[test]
fn timestep_embedding_at_zero_alternates() {
    let e = embed_timestep(0.0, 8).unwrap();
    assert_eq!(e, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
}

#[test]
fn timestep_embedding_stays_in_unit_range_and_separates() {
    for t in [0.0, 0.5, 1.0, 2.7, 100.0] {
        let e = embed_timestep(t, 64).unwrap();
        assert!(e.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
    let a = embed_timestep(1.0, 64).unwrap();
    let b = embed_timestep(1.5, 64).unwrap();
    let gap: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    assert!(gap.sqrt() > 0.0);
}

#[test]
fn timestep_embedding_rejects_odd_width() {
    assert!(matches!(
        embed_timestep(1.0, 7),
        Err(DenoiserError::InvalidConfig(_))
    ));
}

#[test]
fn pool_bev_averages_blocks() {
    let cfg = GridConfig {
        channels: 1,
        height: 64,
        width: 64,
        resolution: 0.5,
    };
    let mut grid = BevGrid::zeros(&cfg);
    grid.set(0, 10, 20, 1.0); // one hot cell
    let cells = pool_bev(&grid, 8, 8).unwrap();
    let mut nonzero = 0;
    for (i, cell) in cells.iter().enumerate() {
        if cell[0] != 0.0 {
            nonzero += 1;
            assert_eq!(i, (10 / 8) * 8 + 20 / 8);
            assert!((cell[0] - 1.0 / 64.0).abs() < 1e-15);
        }
    }
    assert_eq!(nonzero, 1);

    let mut constant = BevGrid::zeros(&cfg);
    constant.data.fill(0.375);
    let cells = pool_bev(&constant, 8, 8).unwrap();
    assert!(cells.iter().all(|c| (c[0] - 0.375).abs() < 1e-12));
}

#[test]
fn pool_bev_requires_divisibility() {
    let grid = BevGrid::zeros(&GridConfig {
        channels: 1,
        height: 10,
        width: 10,
        resolution: 0.5,
    });
    assert!(matches!(
        pool_bev(&grid, 3, 3),
        Err(DenoiserError::InvalidConfig(_))
    ));
}

#[test]
fn compress_bev_token_count_follows_bfc() {
    let config = small_config();
    let grid_cfg = test_grid_config(&config);
    let grid = random_grid(5, &grid_cfg);
    let model = Denoiser::init(config, 1, Standardizer::identity()).unwrap();
    assert_eq!(model.compress_bev(&grid).unwrap().len(), 4);

    let no_bfc = DenoiserConfig {
        use_bfc: false,
        ..config
    };
    let model = Denoiser::init(no_bfc, 1, Standardizer::identity()).unwrap();
    assert_eq!(
        model.compress_bev(&grid).unwrap().len(),
        grid_cfg.height * grid_cfg.width
    );
}

#[test]
fn pool_context_mean_and_identity() {
    let single = ContextEmbedding {
        tokens: vec![vec![1.0, 2.0]],
    };
    assert_eq!(pool_context(&single, true), vec![vec![1.0, 2.0]]);

    let two = ContextEmbedding {
        tokens: vec![vec![1.0, 2.0], vec![3.0, 4.0]],
    };
    assert_eq!(pool_context(&two, true), vec![vec![2.0, 3.0]]);
    assert_eq!(pool_context(&two, false), two.tokens);
}

#[test]
fn denoise_shape_and_determinism() {
    let config = small_config();
    let model = Denoiser::init(config, 3, Standardizer::identity()).unwrap();
    let grid = random_grid(7, &test_grid_config(&config));
    let ctx = random_context(8, 3, config.d_model);
    let noisy = random_path(9, config.horizon);
    let out = model.denoise(&noisy, &grid, &ctx, 0.7).unwrap();
    assert_eq!(out.len(), config.horizon);
    assert!(out.waypoints.iter().all(|w| w.is_finite()));
    let again = model.denoise(&noisy, &grid, &ctx, 0.7).unwrap();
    assert_eq!(out, again);

    let short = random_path(10, 3);
    assert!(matches!(
        model.denoise(&short, &grid, &ctx, 0.7),
        Err(DenoiserError::ShapeMismatch(_))
    ));
}

#[test]
fn zeroed_model_outputs_head_bias() {
    let config = small_config();
    let mut model = Denoiser::init(config, 3, Standardizer::identity()).unwrap();
    for p in model.params_mut() {
        *p = 0.0;
    }
    let n = model.param_count();
    model.params_mut()[n - 2] = 1.25; // head bias x
    model.params_mut()[n - 1] = -0.5; // head bias y
    let grid = random_grid(7, &test_grid_config(&config));
    let ctx = random_context(8, 2, config.d_model);
    let noisy = random_path(9, config.horizon);
    let out = model.denoise(&noisy, &grid, &ctx, 1.0).unwrap();
    for w in &out.waypoints {
        assert_eq!((w.x, w.y), (1.25, -0.5));
    }
}

#[test]
fn cross_attention_is_permutation_invariant_over_bev_tokens() {
    let config = small_config();
    let model = Denoiser::init(config, 11, Standardizer::identity()).unwrap();
    let grid_cfg = test_grid_config(&config);
    let grid = random_grid(13, &grid_cfg);

    // Permute whole pooled blocks: swap the two upper with the two lower.
    let mut permuted = grid.clone();
    let block_h = grid_cfg.height / config.bev_tokens[0];
    for c in 0..grid_cfg.channels {
        for r in 0..grid_cfg.height {
            for col in 0..grid_cfg.width {
                let src_r = (r + 2 * block_h) % grid_cfg.height;
                permuted.set(c, r, col, grid.get(c, src_r, col));
            }
        }
    }

    let ctx = random_context(15, 2, config.d_model);
    let noisy = random_path(17, config.horizon);
    let a = model.denoise(&noisy, &grid, &ctx, 0.4).unwrap();
    let b = model.denoise(&noisy, &permuted, &ctx, 0.4).unwrap();
    for (wa, wb) in a.waypoints.iter().zip(&b.waypoints) {
        assert!((wa.x - wb.x).abs() < 1e-9);
        assert!((wa.y - wb.y).abs() < 1e-9);
    }
}

fn example_for(model: &Denoiser, seed: u64) -> TrainingExample {
    let config = *model.config();
    TrainingExample {
        bev: random_grid(seed, &test_grid_config(&config)),
        context: random_context(seed + 1, 3, config.d_model),
        noised_path: random_path(seed + 2, config.horizon),
        timestep: 10,
        time: 0.9,
        target: random_path(seed + 3, config.horizon),
    }
}

#[test]
fn loss_is_zero_for_oracle_prediction() {
    let config = small_config();
    let model = Denoiser::init(config, 3, Standardizer::identity()).unwrap();
    let mut ex = example_for(&model, 100);
    // Substitute the target with the model's own output.
    ex.target = model
        .denoise(&ex.noised_path, &ex.bev, &ex.context, ex.time)
        .unwrap();
    let loss = model.loss(&ex).unwrap();
    assert!(loss.waypoint_mse < 1e-24);
    assert!(loss.cumsum_mse < 1e-22);
    assert_eq!(loss.total, loss.waypoint_mse + loss.cumsum_mse);
}

#[test]
fn loss_matches_hand_arithmetic_for_unit_offset() {
    let config = small_config();
    let model = Denoiser::init(config, 3, Standardizer::identity()).unwrap();
    let mut ex = example_for(&model, 200);
    let pred = model
        .denoise(&ex.noised_path, &ex.bev, &ex.context, ex.time)
        .unwrap();
    // target = prediction - (1, 0) per waypoint, n = 6:
    // waypoint_mse = 6 / 12 = 0.5; prefix-x errors are 1..6, so
    // cumsum_mse = (1+4+9+16+25+36) / 12 = 91/12.
    ex.target = Path {
        dt: pred.dt,
        waypoints: pred
            .waypoints
            .iter()
            .map(|w| Waypoint::new(w.x - 1.0, w.y))
            .collect(),
    };
    let loss = model.loss(&ex).unwrap();
    assert!((loss.waypoint_mse - 0.5).abs() < 1e-9, "{}", loss.waypoint_mse);
    assert!((loss.cumsum_mse - 91.0 / 12.0).abs() < 1e-8, "{}", loss.cumsum_mse);

    // Doubling the residual quadruples both terms.
    ex.target = Path {
        dt: pred.dt,
        waypoints: pred
            .waypoints
            .iter()
            .map(|w| Waypoint::new(w.x - 2.0, w.y))
            .collect(),
    };
    let loss2 = model.loss(&ex).unwrap();
    assert!((loss2.waypoint_mse - 4.0 * loss.waypoint_mse).abs() < 1e-8);
    assert!((loss2.cumsum_mse - 4.0 * loss.cumsum_mse).abs() < 1e-6);
}

#[test]
fn full_batch_loss_is_order_invariant() {
    let config = small_config();
    let model = Denoiser::init(config, 3, Standardizer::identity()).unwrap();
    let examples: Vec<TrainingExample> = (0..6).map(|i| example_for(&model, 300 + i * 10)).collect();
    let forward_mean: f64 = examples
        .iter()
        .map(|e| model.loss(e).unwrap().total)
        .sum::<f64>()
        / examples.len() as f64;
    let reversed_mean: f64 = examples
        .iter()
        .rev()
        .map(|e| model.loss(e).unwrap().total)
        .sum::<f64>()
        / examples.len() as f64;
    assert!((forward_mean - reversed_mean).abs() < 1e-12);
}

#[test]
fn training_overfits_a_single_example() {
    let config = small_config();
    let model = Denoiser::init(config, 5, Standardizer::identity()).unwrap();
    let ex = example_for(&model, 400);
    let initial = model.loss(&ex).unwrap().total;
    let opt = OptimizerConfig {
        steps: 200,
        batch_size: 1,
        ..Default::default()
    };
    let (trained, curve) = train(&model, &[ex.clone()], &opt, 1).unwrap();
    let final_loss = trained.loss(&ex).unwrap().total;
    assert!(
        final_loss < initial,
        "loss did not improve: {initial} -> {final_loss}"
    );
    assert_eq!(curve.len(), 200);
    assert!(curve.last().unwrap().total < curve.first().unwrap().total);
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let config = small_config();
    let model = Denoiser::init(config, 5, Standardizer::identity()).unwrap();
    let ex = example_for(&model, 500);
    let opt = OptimizerConfig {
        steps: 10,
        batch_size: 1,
        learning_rate: 0.0,
        ..Default::default()
    };
    let (trained, _) = train(&model, &[ex], &opt, 1).unwrap();
    let before: Vec<u64> = model.params().iter().map(|p| p.to_bits()).collect();
    let after: Vec<u64> = trained.params().iter().map(|p| p.to_bits()).collect();
    assert_eq!(before, after);
}

#[test]
fn training_is_seed_deterministic() {
    let config = small_config();
    let model = Denoiser::init(config, 5, Standardizer::identity()).unwrap();
    let dataset: Vec<TrainingExample> = (0..8).map(|i| example_for(&model, 600 + i * 7)).collect();
    let opt = OptimizerConfig {
        steps: 30,
        batch_size: 4,
        ..Default::default()
    };
    let (a, curve_a) = train(&model, &dataset, &opt, 9).unwrap();
    let (b, curve_b) = train(&model, &dataset, &opt, 9).unwrap();
    assert_eq!(a.params(), b.params());
    assert_eq!(curve_a, curve_b);
    let (_, curve_c) = train(&model, &dataset, &opt, 10).unwrap();
    assert_ne!(curve_a, curve_c);
}

#[test]
fn gradients_match_finite_differences() {
    let err = grad_check(&small_config(), 1e-5, 250).unwrap();
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn gradcheck_is_near_exact_for_linear_only_model() {
    let config = DenoiserConfig {
        layers: 0,
        ..small_config()
    };
    let err = grad_check(&config, 1e-5, 250).unwrap();
    assert!(err < 1e-8, "max relative error {err}");
}

#[test]
fn gradcheck_is_stable_under_eps_change() {
    let a = grad_check(&small_config(), 1e-5, 60).unwrap();
    let b = grad_check(&small_config(), 2e-5, 60).unwrap();
    assert!(a.is_finite() && b.is_finite());
    assert!(b < 1e-3);
}

#[test]
fn ablation_flags_change_output() {
    let base = small_config();
    let grid = random_grid(21, &test_grid_config(&base));
    let ctx = random_context(22, 3, base.d_model);
    let noisy = random_path(23, base.horizon);
    let reference = Denoiser::init(base, 2, Standardizer::identity())
        .unwrap()
        .denoise(&noisy, &grid, &ctx, 0.5)
        .unwrap();
    for variant in [
        DenoiserConfig { use_tse: false, ..base },
        DenoiserConfig { use_cap: false, ..base },
        DenoiserConfig { use_caf: false, ..base },
    ] {
        let out = Denoiser::init(variant, 2, Standardizer::identity())
            .unwrap()
            .denoise(&noisy, &grid, &ctx, 0.5)
            .unwrap();
        assert_ne!(out, reference, "variant {variant:?} did not change output");
    }
}
