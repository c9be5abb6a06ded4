use ioc_core::arm::ArmParams;
use ioc_core::basis::BehavioralParams;
use ioc_core::experiments::{add_noise, generate_ground_truth, ExperimentConfig};
use ioc_core::ioc::{
    bilevel_ioc, cumulative_loss, inner_loop, random_theta, single_level_ioc, trajectory_rmse_deg, IocDataset,
    IocExample, IocMethod, IocOptions,
};
use ioc_core::kkt::kkt_vector;
use ioc_core::solver::SolverOptions;
use ioc_core::transcription::{EnvironmentParams, Horizon, TrajectoryVariables};
use ioc_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const N: usize = 40;

fn config() -> ExperimentConfig {
    ExperimentConfig {
        horizon: Horizon::new(0.0, 1.2, N).unwrap(),
        ..Default::default()
    }
}

fn dataset(example: IocExample) -> IocDataset {
    IocDataset::new(vec![example], config().horizon, ArmParams::default()).unwrap()
}

fn q_of(z: &[f64]) -> TrajectoryVariables {
    TrajectoryVariables::unpack(z, &config().horizon).unwrap()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

#[test]
fn inner_loop_at_ground_truth_reproduces_the_data() {
    let cfg = config();
    let ds = dataset(generate_ground_truth(&cfg).unwrap());
    let r = inner_loop(&cfg.theta_true, &ds, None, &SolverOptions::default()).unwrap();
    assert!(r.loss <= 1e-10, "loss {}", r.loss);
}

#[test]
fn warm_started_inner_loop_is_identical_and_cheaper() {
    let cfg = config();
    let ds = dataset(generate_ground_truth(&cfg).unwrap());
    let theta = BehavioralParams([0.1, 0.4, 0.2, 0.2, 0.1]);
    let opts = SolverOptions::default();
    let a = inner_loop(&theta, &ds, None, &opts).unwrap();
    let b = inner_loop(&theta, &ds, Some(&a.predictions), &opts).unwrap();
    assert!(b.reports[0].iterations < a.reports[0].iterations);
    let rmse = trajectory_rmse_deg(&q_of(&a.predictions[0].z), &q_of(&b.predictions[0].z)).unwrap();
    assert!(rmse < 1e-6);
    assert!((a.loss - b.loss).abs() < 1e-12);
}

#[test]
fn inner_loop_reports_non_finite_weights() {
    let cfg = config();
    let ds = dataset(generate_ground_truth(&cfg).unwrap());
    let bad = BehavioralParams([f64::NAN, 0.2, 0.2, 0.2, 0.2]);
    assert!(inner_loop(&bad, &ds, None, &SolverOptions::default()).is_err());
}

#[test]
fn single_level_from_the_truth_stops_at_once() {
    let cfg = config();
    let ds = dataset(generate_ground_truth(&cfg).unwrap());
    let r = single_level_ioc(&ds, &cfg.theta_true, &IocOptions::default()).unwrap();
    assert!(r.report.converged());
    assert!(r.report.iterations <= 1, "{}", r.report);
    assert!(r.loss <= 1e-10);
    assert_eq!(r.method, IocMethod::SingleLevel);
}

#[test]
fn single_level_recovers_noiseless_trajectories_from_random_starts() {
    let cfg = config();
    let truth = generate_ground_truth(&cfg).unwrap();
    let ds = dataset(truth.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..4 {
        let theta0 = random_theta(&mut rng);
        let r = single_level_ioc(&ds, &theta0, &IocOptions::default()).unwrap();
        assert!(r.loss <= 1e-8, "loss {} from {:?}", r.loss, theta0);
        let rmse = trajectory_rmse_deg(&q_of(&r.predictions[0].z), &truth.y).unwrap();
        assert!(rmse <= 0.1, "rmse {rmse}");
        assert!((r.theta_hat.sum() - 1.0).abs() < 1e-12);
        let task = ds.task(0).unwrap();
        let k = kkt_vector(&r.predictions[0].z, &r.predictions[0].nu, &r.theta_hat, &task).unwrap();
        assert!(inf_norm(&k) <= 1e-6);
    }
}

#[test]
fn bilevel_matches_single_level_on_noiseless_data() {
    let cfg = config();
    let truth = generate_ground_truth(&cfg).unwrap();
    let ds = dataset(truth.clone());
    let theta0 = random_theta(&mut ChaCha8Rng::seed_from_u64(4));
    let opts = IocOptions::default();
    let b = bilevel_ioc(&ds, &theta0, &opts).unwrap();
    assert!(b.loss <= 1e-6, "bilevel loss {}", b.loss);
    assert_eq!(b.method, IocMethod::Bilevel);
    let s = single_level_ioc(&ds, &theta0, &opts).unwrap();
    let rmse = trajectory_rmse_deg(&q_of(&b.predictions[0].z), &q_of(&s.predictions[0].z)).unwrap();
    assert!(rmse <= 0.1, "method disagreement {rmse}");
    let again = bilevel_ioc(&ds, &theta0, &opts).unwrap();
    assert_eq!(again.theta_hat, b.theta_hat);
    assert_eq!(again.evaluations, b.evaluations);
}

#[test]
fn single_level_never_ends_above_the_warm_start_loss() {
    let cfg = config();
    let truth = generate_ground_truth(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for (k, sigma) in [0.3, 2.0, 6.0].into_iter().enumerate() {
        let ds = dataset(add_noise(&truth, [sigma, sigma], 100 + k as u64));
        let theta0 = random_theta(&mut rng);
        let warm = inner_loop(&theta0, &ds, None, &SolverOptions::default()).unwrap();
        let r = single_level_ioc(&ds, &theta0, &IocOptions::default()).unwrap();
        assert!(r.loss <= warm.loss + 1e-9, "sigma {sigma}: {} > {}", r.loss, warm.loss);
        let rmse = trajectory_rmse_deg(&q_of(&r.predictions[0].z), &truth.y).unwrap();
        assert!(rmse <= 2.0 * sigma, "sigma {sigma}: rmse {rmse}");
    }
}

#[test]
fn single_level_handles_several_examples() {
    let cfg = config();
    let mut examples = Vec::new();
    for goal in [[1.5, 0.6], [1.2, 1.0]] {
        let c = ExperimentConfig {
            environment: EnvironmentParams {
                p_goal: goal,
                ..Default::default()
            },
            ..cfg.clone()
        };
        examples.push(generate_ground_truth(&c).unwrap());
    }
    let ds = IocDataset::new(examples.clone(), cfg.horizon, cfg.arm).unwrap();
    let theta0 = BehavioralParams([0.3, 0.1, 0.3, 0.2, 0.1]);
    let r = single_level_ioc(&ds, &theta0, &IocOptions::default()).unwrap();
    assert_eq!(r.predictions.len(), 2);
    assert!(r.loss <= 1e-8, "loss {}", r.loss);
    let zs: Vec<Vec<f64>> = r.predictions.iter().map(|p| p.z.clone()).collect();
    assert!((cumulative_loss(&zs, &ds).unwrap() - r.loss).abs() < 1e-15);
}

#[test]
fn dataset_dimensions_are_validated() {
    let cfg = config();
    let mut ex = generate_ground_truth(&cfg).unwrap();
    ex.y.q.pop();
    assert!(matches!(
        IocDataset::new(vec![ex], cfg.horizon, cfg.arm),
        Err(Error::DimensionMismatch { .. })
    ));
    assert!(IocDataset::new(vec![], cfg.horizon, cfg.arm).is_err());
}
