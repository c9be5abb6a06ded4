//! The forward reaching problem at fixed weights.

use serde::{Deserialize, Serialize};

use crate::arm::{inverse_kinematics, ElbowBranch};
use crate::basis::{weighted_gradient, weighted_objective, weighted_value, BehavioralParams};
use crate::error::{check_len, Result};
use crate::kkt::{inf_norm, kkt_vector};
use crate::solver::{solve_equality_nlp, NlpProblem, NlpSolution, SolverOptions};
use crate::sparse::{CsrMatrix, Triplets};
use crate::transcription::{constraints_weighted_hessian_triplets, ReachingTask, TrajectoryVariables};

/// `min_z θᵀφ(z)  s.t.  h(z; x) = 0` as an [`NlpProblem`].
#[derive(Debug, Clone, Copy)]
pub struct ReachingOcp<'a> {
    pub task: &'a ReachingTask,
    pub theta: BehavioralParams,
}

impl NlpProblem for ReachingOcp<'_> {
    fn num_variables(&self) -> usize {
        self.task.dim()
    }

    fn num_constraints(&self) -> usize {
        self.task.num_constraints()
    }

    fn objective(&self, z: &[f64]) -> Result<f64> {
        weighted_value(z, &self.theta, &self.task.horizon, &self.task.arm)
    }

    fn gradient(&self, z: &[f64]) -> Result<Vec<f64>> {
        weighted_gradient(z, &self.theta, &self.task.horizon, &self.task.arm)
    }

    fn objective_hessian(&self, z: &[f64]) -> Result<Triplets> {
        Ok(weighted_objective(z, &self.theta, &self.task.horizon, &self.task.arm)?.hessian)
    }

    fn constraints(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.task.constraints(z)
    }

    fn constraints_jacobian(&self, z: &[f64]) -> Result<CsrMatrix> {
        self.task.constraints_jacobian(z)
    }

    fn constraints_weighted_hessian(&self, z: &[f64], nu: &[f64]) -> Result<Triplets> {
        constraints_weighted_hessian_triplets(z, nu, &self.task.horizon, &self.task.arm)
    }
}

/// Joint-space straight line from the initial posture to the elbow-down
/// inverse kinematics solution at the goal, finite-difference velocities
/// and zero accelerations.
pub fn initial_guess(task: &ReachingTask) -> Result<TrajectoryVariables> {
    let n = task.horizon.samples;
    let dt = task.horizon.dt();
    let q0 = task.env.q_init;
    let q1 = inverse_kinematics(task.env.p_goal, ElbowBranch::ElbowDown, &task.arm)?;
    let q: Vec<[f64; 2]> = (0..=n)
        .map(|k| {
            let s = k as f64 / n as f64;
            [q0[0] + s * (q1[0] - q0[0]), q0[1] + s * (q1[1] - q0[1])]
        })
        .collect();
    let dq = q
        .windows(2)
        .map(|w| [(w[1][0] - w[0][0]) / dt, (w[1][1] - w[0][1]) / dt])
        .collect();
    Ok(TrajectoryVariables {
        q,
        dq,
        ddq: vec![[0.0; 2]; n - 1],
    })
}

/// A primal point with its constraint multipliers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimalDual {
    pub z: Vec<f64>,
    pub nu: Vec<f64>,
}

/// Solves the forward problem. Without a warm start the solve begins at
/// [`initial_guess`] with zero multipliers.
pub fn solve_ocp(
    task: &ReachingTask,
    theta: &BehavioralParams,
    warm: Option<&PrimalDual>,
    opts: &SolverOptions,
) -> Result<NlpSolution> {
    let (z0, nu0) = match warm {
        Some(w) => {
            check_len("warm-start primal", task.dim(), w.z.len())?;
            check_len("warm-start multipliers", task.num_constraints(), w.nu.len())?;
            (w.z.clone(), w.nu.clone())
        }
        None => (initial_guess(task)?.pack(), vec![0.0; task.num_constraints()]),
    };
    let problem = ReachingOcp {
        task,
        theta: *theta,
    };
    solve_equality_nlp(&problem, &z0, &nu0, opts)
}

/// ∞-norm of the KKT residual of a forward solution.
pub fn kkt_residual(task: &ReachingTask, theta: &BehavioralParams, z: &[f64], nu: &[f64]) -> Result<f64> {
    Ok(inf_norm(&kkt_vector(z, nu, theta, task)?))
}
