//! Central finite-difference checks of every analytic derivative in the
//! model: arm kinematics and dynamics, transcription constraints, basis
//! costs and the KKT Jacobians.

use std::fmt;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::arm::{
    end_effector_velocity, end_effector_velocity_derivatives, fk_derivatives, forward_kinematics,
    inverse_dynamics, inverse_dynamics_derivatives, ArmParams, JointState,
};
use crate::basis::{
    basis_first_derivatives, basis_second_derivatives, basis_values, theta_mixed_jacobian,
    BehavioralParams, NUM_BASIS,
};
use crate::error::Result;
use crate::kkt::{kkt_jacobian_primal_dual, kkt_jacobian_theta, kkt_vector};
use crate::transcription::{
    constraints, constraints_jacobian, constraints_weighted_hessian, EnvironmentParams, Horizon,
    ReachingTask,
};

pub const GRADIENT_TOL: f64 = 1e-5;
pub const HESSIAN_TOL: f64 = 1e-4;

/// Worst relative mismatch of one derivative across all sampled points.
#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub points: usize,
    pub max_relative_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_relative_error <= self.tolerance
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DerivativeReport {
    pub checks: Vec<CheckResult>,
    pub points: usize,
    pub seed: u64,
    pub wall_time: Duration,
}

impl DerivativeReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }
}

impl fmt::Display for DerivativeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{:<4} {:<40} points={:<4} max_rel_err={:.3e} tol={:.0e}",
                if c.passed() { "ok" } else { "FAIL" },
                c.name,
                c.points,
                c.max_relative_error,
                c.tolerance
            )?;
        }
        write!(f, "{} checks in {:.2?}", self.checks.len(), self.wall_time)
    }
}

/// `‖a − b‖∞ / max(‖a‖∞, ‖b‖∞)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Central-difference Jacobian of `f` at `x`, column by column, flattened
/// row-major as `out[i * x.len() + j] = ∂f_i/∂x_j`.
pub fn central_jacobian<F>(mut f: F, x: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    let n = x.len();
    let mut xp = x.to_vec();
    let mut cols = Vec::with_capacity(n);
    for j in 0..n {
        let h = step * x[j].abs().max(1.0);
        xp[j] = x[j] + h;
        let fp = f(&xp);
        xp[j] = x[j] - h;
        let fm = f(&xp);
        xp[j] = x[j];
        cols.push(
            fp.iter()
                .zip(&fm)
                .map(|(a, b)| (a - b) / (2.0 * h))
                .collect::<Vec<_>>(),
        );
    }
    let m = cols.first().map_or(0, Vec::len);
    let mut out = vec![0.0; m * n];
    for (j, c) in cols.iter().enumerate() {
        for (i, v) in c.iter().enumerate() {
            out[i * n + j] = *v;
        }
    }
    out
}

const FIRST_STEP: f64 = 1e-6;
const SECOND_STEP: f64 = 1e-5;

struct Collector {
    checks: Vec<CheckResult>,
}

impl Collector {
    fn record(&mut self, name: &str, tolerance: f64, err: f64) {
        match self.checks.iter_mut().find(|c| c.name == name) {
            Some(c) => {
                c.points += 1;
                c.max_relative_error = c.max_relative_error.max(err);
            }
            None => self.checks.push(CheckResult {
                name: name.to_string(),
                points: 1,
                max_relative_error: err,
                tolerance,
            }),
        }
    }
}

fn random_arm(rng: &mut ChaCha8Rng) -> ArmParams {
    let l = [rng.random_range(0.5..1.5), rng.random_range(0.5..1.5)];
    ArmParams {
        segment_lengths: l,
        com_offsets: [l[0] * rng.random_range(0.2..0.8), l[1] * rng.random_range(0.2..0.8)],
        masses: [rng.random_range(0.5..3.0), rng.random_range(0.5..3.0)],
        inertias: [rng.random_range(0.01..0.5), rng.random_range(0.01..0.5)],
        gravity: 9.81,
    }
}

fn check_arm(rng: &mut ChaCha8Rng, c: &mut Collector) {
    let arm = random_arm(rng);
    let x: [f64; 6] = std::array::from_fn(|_| rng.random_range(-3.0..3.0));
    let q = [x[0], x[1]];

    let fk = fk_derivatives(q, &arm);
    let num = central_jacobian(|v| forward_kinematics([v[0], v[1]], &arm).to_vec(), &q, FIRST_STEP);
    let ana: Vec<f64> = fk.jacobian.iter().flatten().copied().collect();
    c.record("arm: forward kinematics jacobian", GRADIENT_TOL, relative_error(&ana, &num));
    let num = central_jacobian(
        |v| fk_derivatives([v[0], v[1]], &arm).jacobian.iter().flatten().copied().collect(),
        &q,
        SECOND_STEP,
    );
    let ana: Vec<f64> = fk.second.iter().flatten().flatten().copied().collect();
    c.record("arm: forward kinematics second", HESSIAN_TOL, relative_error(&ana, &num));

    let state = JointState::from_array(x);
    let td = inverse_dynamics_derivatives(&state, &arm);
    let tau = |v: &[f64]| {
        inverse_dynamics(&JointState::from_array(v.try_into().unwrap()), &arm).to_vec()
    };
    c.record(
        "arm: inverse dynamics value",
        GRADIENT_TOL,
        relative_error(&td.torque, &tau(&x)),
    );
    let num = central_jacobian(tau, &x, FIRST_STEP);
    let ana: Vec<f64> = td.jacobian.iter().flatten().copied().collect();
    c.record("arm: inverse dynamics jacobian", GRADIENT_TOL, relative_error(&ana, &num));
    let num = central_jacobian(
        |v| {
            inverse_dynamics_derivatives(&JointState::from_array(v.try_into().unwrap()), &arm)
                .jacobian
                .iter()
                .flatten()
                .copied()
                .collect()
        },
        &x,
        SECOND_STEP,
    );
    let ana: Vec<f64> = td.hessian.iter().flatten().flatten().copied().collect();
    c.record("arm: inverse dynamics hessian", HESSIAN_TOL, relative_error(&ana, &num));

    let y = [x[0], x[1], x[2], x[3]];
    let vd = end_effector_velocity_derivatives(q, [x[2], x[3]], &arm);
    let num = central_jacobian(
        |v| end_effector_velocity([v[0], v[1]], [v[2], v[3]], &arm).to_vec(),
        &y,
        FIRST_STEP,
    );
    let ana: Vec<f64> = vd.jacobian.iter().flatten().copied().collect();
    c.record("arm: end-effector velocity jacobian", GRADIENT_TOL, relative_error(&ana, &num));
    let num = central_jacobian(
        |v| {
            end_effector_velocity_derivatives([v[0], v[1]], [v[2], v[3]], &arm)
                .jacobian
                .iter()
                .flatten()
                .copied()
                .collect()
        },
        &y,
        SECOND_STEP,
    );
    let ana: Vec<f64> = vd.hessian.iter().flatten().flatten().copied().collect();
    c.record("arm: end-effector velocity hessian", HESSIAN_TOL, relative_error(&ana, &num));
}

fn random_task(rng: &mut ChaCha8Rng) -> ReachingTask {
    let arm = random_arm(rng);
    let samples = rng.random_range(3..=10);
    let tf = rng.random_range(0.3..1.5);
    let horizon = Horizon::new(0.0, tf, samples).expect("valid horizon");
    let reach = arm.segment_lengths[0] + arm.segment_lengths[1];
    let (r, a) = (
        rng.random_range(0.6..0.9) * reach,
        rng.random_range(-3.0..3.0f64),
    );
    let env = EnvironmentParams {
        q_init: [rng.random_range(-2.0..0.0), rng.random_range(-1.0..1.0)],
        p_goal: [r * a.cos(), r * a.sin()],
    };
    ReachingTask::new(arm, horizon, env).expect("valid task")
}

fn dense_rows(m: &crate::sparse::CsrMatrix) -> Vec<f64> {
    m.to_dense().into_iter().flatten().collect()
}

fn check_problem(rng: &mut ChaCha8Rng, c: &mut Collector) -> Result<()> {
    let task = random_task(rng);
    let (h, arm, env) = (task.horizon, task.arm, task.env);
    let z: Vec<f64> = (0..task.dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
    let nu: Vec<f64> = (0..task.num_constraints())
        .map(|_| rng.random_range(-2.0..2.0))
        .collect();
    let theta = BehavioralParams(std::array::from_fn(|_| rng.random_range(0.0..1.0)));

    let jac = constraints_jacobian(&z, &env, &h, &arm)?;
    let num = central_jacobian(|v| constraints(v, &env, &h, &arm).unwrap(), &z, FIRST_STEP);
    c.record("transcription: constraint jacobian", GRADIENT_TOL, relative_error(&dense_rows(&jac), &num));
    let ana = dense_rows(&constraints_weighted_hessian(&z, &env, &nu, &h, &arm)?);
    let num = central_jacobian(
        |v| constraints_jacobian(v, &env, &h, &arm).unwrap().tr_mul_vec(&nu),
        &z,
        SECOND_STEP,
    );
    c.record("transcription: weighted constraint hessian", HESSIAN_TOL, relative_error(&ana, &num));

    let grads = basis_first_derivatives(&z, &h, &arm)?;
    let hess = basis_second_derivatives(&z, &h, &arm)?;
    for b in 0..NUM_BASIS {
        let num = central_jacobian(|v| vec![basis_values(v, &h, &arm).unwrap()[b]], &z, FIRST_STEP);
        c.record(&format!("basis: phi{} gradient", b + 1), GRADIENT_TOL, relative_error(&grads[b], &num));
        let num = central_jacobian(
            |v| basis_first_derivatives(v, &h, &arm).unwrap().swap_remove(b),
            &z,
            SECOND_STEP,
        );
        c.record(&format!("basis: phi{} hessian", b + 1), HESSIAN_TOL, relative_error(&dense_rows(&hess[b]), &num));
    }

    let pd = kkt_jacobian_primal_dual(&z, &nu, &theta, &task)?;
    let mut w = z.clone();
    w.extend_from_slice(&nu);
    let n = z.len();
    let num = central_jacobian(|v| kkt_vector(&v[..n], &v[n..], &theta, &task).unwrap(), &w, SECOND_STEP);
    c.record("kkt: primal-dual jacobian", HESSIAN_TOL, relative_error(&dense_rows(&pd.to_csr()), &num));

    let tj = kkt_jacobian_theta(&z, &nu, &theta, &task)?;
    let rows = tj.nrows();
    let mut ana = vec![0.0; rows * NUM_BASIS];
    for (j, col) in tj.columns.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            ana[i * NUM_BASIS + j] = *v;
        }
    }
    let num = central_jacobian(
        |t| kkt_vector(&z, &nu, &BehavioralParams(t.try_into().unwrap()), &task).unwrap(),
        &theta.0,
        FIRST_STEP,
    );
    c.record("kkt: theta jacobian", GRADIENT_TOL, relative_error(&ana, &num));
    let mixed = theta_mixed_jacobian(&z, &h, &arm)?;
    c.record(
        "basis: theta mixed jacobian",
        GRADIENT_TOL,
        relative_error(&mixed.concat(), &grads.concat()),
    );
    Ok(())
}

/// Runs every suite on `points` random configurations, each drawing a random
/// arm, horizon, task and evaluation point.
pub fn run_derivative_checks(points: usize, seed: u64) -> Result<DerivativeReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = Collector { checks: Vec::new() };
    for _ in 0..points {
        check_arm(&mut rng, &mut c);
        check_problem(&mut rng, &mut c)?;
    }
    Ok(DerivativeReport {
        checks: c.checks,
        points,
        seed,
        wall_time: start.elapsed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_of_identical_vectors_is_zero() {
        assert_eq!(relative_error(&[1.0, -2.0], &[1.0, -2.0]), 0.0);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
        assert!((relative_error(&[1.0, 2.0], &[1.0, 2.2]) - 0.2 / 2.2).abs() < 1e-15);
    }

    #[test]
    fn central_jacobian_of_linear_map_is_exact() {
        let j = central_jacobian(|x| vec![2.0 * x[0] - x[1], 3.0 * x[1]], &[0.3, -0.7], 1e-6);
        let expect = [2.0, -1.0, 0.0, 3.0];
        assert!(relative_error(&j, &expect) < 1e-9);
    }

    #[test]
    fn a_few_points_pass() {
        let r = run_derivative_checks(5, 1).unwrap();
        assert!(r.all_passed(), "{r}");
    }
}
