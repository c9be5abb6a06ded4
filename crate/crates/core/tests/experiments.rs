use ioc_core::arm::forward_kinematics;
use ioc_core::basis::BehavioralParams;
use ioc_core::experiments::{
    add_noise, export_artifacts, generate_ground_truth, noise_sweep, timing_benchmark, BenchCells,
    ExperimentConfig,
};
use ioc_core::transcription::Horizon;

fn small_config(levels: usize) -> ExperimentConfig {
    ExperimentConfig {
        horizon: Horizon::new(0.0, 1.2, 30).unwrap(),
        n_noise: levels,
        seed: 99,
        ..Default::default()
    }
}

fn chord_deviation(cfg: &ExperimentConfig, q: &[[f64; 2]]) -> f64 {
    let a = forward_kinematics(cfg.environment.q_init, &cfg.arm);
    let b = cfg.environment.p_goal;
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len = dx.hypot(dy);
    q.iter()
        .map(|k| {
            let p = forward_kinematics(*k, &cfg.arm);
            ((p[0] - a[0]) * dy - (p[1] - a[1]) * dx).abs() / len
        })
        .fold(0.0, f64::max)
}

#[test]
fn smoothness_weight_alone_reaches_in_a_straight_line() {
    let cfg = ExperimentConfig {
        theta_true: BehavioralParams::unit(2),
        ..Default::default()
    };
    let ex = generate_ground_truth(&cfg).unwrap();
    assert!(chord_deviation(&cfg, &ex.y.q) < 1e-2);
}

#[test]
fn ground_truth_lands_on_the_goal() {
    for theta in [
        BehavioralParams::default(),
        BehavioralParams::unit(0),
        BehavioralParams([0.1, 0.3, 0.1, 0.4, 0.1]),
    ] {
        let cfg = ExperimentConfig {
            theta_true: theta,
            ..Default::default()
        };
        let ex = generate_ground_truth(&cfg).unwrap();
        let p = forward_kinematics(*ex.y.q.last().unwrap(), &cfg.arm);
        assert!((p[0] - cfg.environment.p_goal[0]).abs() < 1e-8);
        assert!((p[1] - cfg.environment.p_goal[1]).abs() < 1e-8);
        assert_eq!(ex.provenance.unwrap().theta_true, theta);
    }
}

#[test]
fn vanishing_noise_leaves_the_example_unchanged() {
    let ex = generate_ground_truth(&small_config(2)).unwrap();
    let noisy = add_noise(&ex, [1e-12, 1e-12], 3);
    for (a, b) in noisy.y.q.iter().zip(&ex.y.q) {
        assert!((a[0] - b[0]).abs() < 1e-13 && (a[1] - b[1]).abs() < 1e-13);
    }
    assert_eq!(noisy.provenance.unwrap().noise_seed, Some(3));
}

#[test]
fn noise_sample_deviation_matches_the_requested_level() {
    let ex = generate_ground_truth(&ExperimentConfig::default()).unwrap();
    for seed in 0..5 {
        let noisy = add_noise(&ex, [10.0, 10.0], seed);
        for j in 0..2 {
            let d: Vec<f64> = noisy
                .y
                .q
                .iter()
                .zip(&ex.y.q)
                .map(|(a, b)| (a[j] - b[j]).to_degrees())
                .collect();
            let mean = d.iter().sum::<f64>() / d.len() as f64;
            let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64;
            let std = var.sqrt();
            assert!((std - 10.0).abs() <= 1.5, "seed {seed} joint {j}: {std}");
        }
    }
}

#[test]
fn sweep_artifacts_are_complete_and_reproducible_from_the_manifest() {
    let cfg = small_config(3);
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let sweep = noise_sweep(&cfg).unwrap();
    assert_eq!(sweep.cells.len(), 9);
    export_artifacts(&cfg, &sweep, None, "noise-sweep", &first).unwrap();

    let csv = std::fs::read_to_string(first.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 9 + 1);
    for cell in &sweep.cells {
        assert!(cell.theta_hat.is_some(), "cell {} failed: {}", cell.index, cell.status);
        assert!(cell.trajectory_rmse >= 0.0 && cell.theta_error >= 0.0 && cell.loss >= 0.0);
    }
    for name in ["heatmap_theta_error.svg", "heatmap_rmse.svg"] {
        let svg = std::fs::read_to_string(first.join(name)).unwrap();
        for p in ["-1", "0", "1"] {
            assert!(svg.contains(&format!("10<tspan dy=\"-6\" font-size=\"10\">{p}</tspan>")));
        }
    }
    for name in ["trajectories_max_rmse.csv", "trajectories_median_rmse.csv"] {
        let text = std::fs::read_to_string(first.join(name)).unwrap();
        assert!(text.starts_with("t,true_q1,true_q2,noisy_q1,noisy_q2,initial_q1,initial_q2,recovered_q1,recovered_q2"));
        assert_eq!(text.lines().count(), 30 + 2);
    }

    let replay = ExperimentConfig::load(&first.join("manifest.toml")).unwrap();
    assert_eq!(replay, cfg);
    let second = dir.path().join("second");
    export_artifacts(&replay, &noise_sweep(&replay).unwrap(), None, "noise-sweep", &second).unwrap();
    for name in ["sweep.csv", "trajectories_max_rmse.csv", "trajectories_median_rmse.csv", "heatmap_rmse.svg"] {
        assert_eq!(
            std::fs::read(first.join(name)).unwrap(),
            std::fs::read(second.join(name)).unwrap(),
            "{name} differs"
        );
    }
}

#[test]
fn timing_benchmark_is_repeatable_and_favours_single_level() {
    let cfg = ExperimentConfig {
        bench_cells: BenchCells::Diagonal,
        ..small_config(2)
    };
    let a = timing_benchmark(&cfg).unwrap();
    assert_eq!(a.runs.len(), 2);
    assert_eq!(a.single_level_failures + a.bilevel_failures, 0);
    assert!(a.speedup > 1.0, "speedup {}", a.speedup);
    let b = timing_benchmark(&cfg).unwrap();
    for (x, y) in a.runs.iter().zip(&b.runs) {
        assert_eq!(x.single_level_iterations, y.single_level_iterations);
        assert_eq!(x.bilevel_evaluations, y.bilevel_evaluations);
    }
}
