//! The five basis costs of the reaching model and their derivatives.
//!
//! Every basis is a sum of squared two-vectors `Σ_k ‖r_k‖²`, where each
//! residual depends on a handful of neighbouring knots:
//!
//! | basis | residual `r_k` | knots |
//! |-------|----------------|-------|
//! | φ₁ joint velocity | `dq_k` | `k = 0..N-1` |
//! | φ₂ joint torque | `τ(q_k, dq_k, ddq_k)` | `k = 0..N-2` |
//! | φ₃ end-effector velocity | `(FK(q_{k+1}) - FK(q_k)) / dt` | `k = 0..N-1` |
//! | φ₄ joint jerk | `(ddq_{k+1} - ddq_k) / dt` | `k = 0..N-3` |
//! | φ₅ torque change | `(τ_{k+1} - τ_k) / dt` | `k = 0..N-3` |
//!
//! Each sum runs over every knot at which its residual is defined, so the
//! final Euler step is always penalized.

use serde::{Deserialize, Serialize};

use crate::arm::{
    fk_derivatives, forward_kinematics, inverse_dynamics, inverse_dynamics_derivatives,
    ArmParams, JointState, TorqueDerivatives,
};
use crate::error::{check_len, Error, Result};
use crate::sparse::{CsrMatrix, Triplets};
use crate::transcription::{Horizon, Layout};

pub const NUM_BASIS: usize = 5;

pub const BASIS_NAMES: [&str; NUM_BASIS] = [
    "joint_velocity",
    "joint_torque",
    "end_effector_velocity",
    "joint_jerk",
    "torque_change",
];

/// Weights of the five basis costs, in the order of [`BASIS_NAMES`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BehavioralParams(pub [f64; NUM_BASIS]);

impl Default for BehavioralParams {
    fn default() -> Self {
        BehavioralParams([0.2; NUM_BASIS])
    }
}

impl BehavioralParams {
    pub fn new(theta: [f64; NUM_BASIS]) -> Self {
        BehavioralParams(theta)
    }

    /// Unit weight on basis `j` (0-based).
    pub fn unit(j: usize) -> Self {
        let mut t = [0.0; NUM_BASIS];
        t[j] = 1.0;
        BehavioralParams(t)
    }

    pub fn as_array(&self) -> &[f64; NUM_BASIS] {
        &self.0
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn scaled(&self, c: f64) -> Self {
        BehavioralParams(self.0.map(|v| c * v))
    }

    /// Rescales onto the slice `Σθ = 1`.
    pub fn normalized(&self) -> Result<Self> {
        let s = self.sum();
        if !(s.abs() >= 1e-12) {
            return Err(Error::DegenerateGauge(s));
        }
        Ok(self.scaled(1.0 / s))
    }

    pub fn has_negative(&self) -> bool {
        self.0.iter().any(|v| *v < 0.0)
    }

    pub fn distance(&self, other: &Self) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

const MAX_LOCAL: usize = 12;

/// One squared residual `‖r‖²` with its local derivatives.
struct Term {
    len: usize,
    idx: [usize; MAX_LOCAL],
    r: [f64; 2],
    jac: [[f64; MAX_LOCAL]; 2],
    hess: [[[f64; MAX_LOCAL]; MAX_LOCAL]; 2],
}

impl Term {
    fn new() -> Box<Self> {
        Box::new(Term {
            len: 0,
            idx: [0; MAX_LOCAL],
            r: [0.0; 2],
            jac: [[0.0; MAX_LOCAL]; 2],
            hess: [[[0.0; MAX_LOCAL]; MAX_LOCAL]; 2],
        })
    }

    fn reset(&mut self, len: usize, with_hessian: bool) {
        self.len = len;
        for i in 0..2 {
            self.jac[i][..len].fill(0.0);
            if with_hessian {
                for row in &mut self.hess[i][..len] {
                    row[..len].fill(0.0);
                }
            }
        }
    }

    fn value(&self) -> f64 {
        self.r[0] * self.r[0] + self.r[1] * self.r[1]
    }

    fn add_gradient(&self, scale: f64, grad: &mut [f64]) {
        for a in 0..self.len {
            let g = self.r[0] * self.jac[0][a] + self.r[1] * self.jac[1][a];
            grad[self.idx[a]] += 2.0 * scale * g;
        }
    }

    fn add_hessian(&self, scale: f64, out: &mut Triplets) {
        for a in 0..self.len {
            for b in 0..self.len {
                let mut v = 0.0;
                for i in 0..2 {
                    v += self.jac[i][a] * self.jac[i][b] + self.r[i] * self.hess[i][a][b];
                }
                out.push(self.idx[a], self.idx[b], 2.0 * scale * v);
            }
        }
    }
}

fn state_indices(lay: &Layout, k: usize) -> [usize; 6] {
    [
        lay.q(k, 0),
        lay.q(k, 1),
        lay.dq(k, 0),
        lay.dq(k, 1),
        lay.ddq(k, 0),
        lay.ddq(k, 1),
    ]
}

fn state_at(z: &[f64], lay: &Layout, k: usize) -> JointState {
    let i = state_indices(lay, k);
    JointState::from_array(i.map(|j| z[j]))
}

/// Knot counts of each basis sum for a horizon of `n` intervals.
pub fn term_counts(n: usize) -> [usize; NUM_BASIS] {
    [n, n - 1, n, n - 2, n - 2]
}

/// Calls `sink(basis, term)` for every residual term of every basis.
fn for_each_term(
    z: &[f64],
    horizon: &Horizon,
    arm: &ArmParams,
    with_hessian: bool,
    mut sink: impl FnMut(usize, &Term),
) {
    let lay = horizon.layout();
    let n = lay.n;
    let dt = horizon.dt();
    let mut term = Term::new();
    let counts = term_counts(n);

    // φ₁
    for k in 0..counts[0] {
        term.reset(2, with_hessian);
        for j in 0..2 {
            term.idx[j] = lay.dq(k, j);
            term.r[j] = z[lay.dq(k, j)];
            term.jac[j][j] = 1.0;
        }
        sink(0, &term);
    }

    // Torque derivatives are shared by φ₂ and φ₅.
    let torques: Vec<TorqueDerivatives> = (0..n - 1)
        .map(|k| inverse_dynamics_derivatives(&state_at(z, &lay, k), arm))
        .collect();

    // φ₂
    for (k, td) in torques.iter().enumerate().take(counts[1]) {
        term.reset(6, with_hessian);
        term.idx[..6].copy_from_slice(&state_indices(&lay, k));
        term.r = td.torque;
        for i in 0..2 {
            term.jac[i][..6].copy_from_slice(&td.jacobian[i]);
            if with_hessian {
                for a in 0..6 {
                    term.hess[i][a][..6].copy_from_slice(&td.hessian[i][a]);
                }
            }
        }
        sink(1, &term);
    }

    // φ₃
    for k in 0..counts[2] {
        term.reset(4, with_hessian);
        let a = fk_derivatives([z[lay.q(k, 0)], z[lay.q(k, 1)]], arm);
        let b = fk_derivatives([z[lay.q(k + 1, 0)], z[lay.q(k + 1, 1)]], arm);
        let pa = forward_kinematics([z[lay.q(k, 0)], z[lay.q(k, 1)]], arm);
        let pb = forward_kinematics([z[lay.q(k + 1, 0)], z[lay.q(k + 1, 1)]], arm);
        term.idx[..4].copy_from_slice(&[lay.q(k, 0), lay.q(k, 1), lay.q(k + 1, 0), lay.q(k + 1, 1)]);
        for i in 0..2 {
            term.r[i] = (pb[i] - pa[i]) / dt;
            for j in 0..2 {
                term.jac[i][j] = -a.jacobian[i][j] / dt;
                term.jac[i][2 + j] = b.jacobian[i][j] / dt;
            }
            if with_hessian {
                for j in 0..2 {
                    for l in 0..2 {
                        term.hess[i][j][l] = -a.second[i][j][l] / dt;
                        term.hess[i][2 + j][2 + l] = b.second[i][j][l] / dt;
                    }
                }
            }
        }
        sink(2, &term);
    }

    // φ₄
    for k in 0..counts[3] {
        term.reset(4, with_hessian);
        for j in 0..2 {
            term.idx[j] = lay.ddq(k, j);
            term.idx[2 + j] = lay.ddq(k + 1, j);
            term.r[j] = (z[lay.ddq(k + 1, j)] - z[lay.ddq(k, j)]) / dt;
            term.jac[j][j] = -1.0 / dt;
            term.jac[j][2 + j] = 1.0 / dt;
        }
        sink(3, &term);
    }

    // φ₅
    for k in 0..counts[4] {
        term.reset(12, with_hessian);
        let (a, b) = (&torques[k], &torques[k + 1]);
        term.idx[..6].copy_from_slice(&state_indices(&lay, k));
        term.idx[6..12].copy_from_slice(&state_indices(&lay, k + 1));
        for i in 0..2 {
            term.r[i] = (b.torque[i] - a.torque[i]) / dt;
            for c in 0..6 {
                term.jac[i][c] = -a.jacobian[i][c] / dt;
                term.jac[i][6 + c] = b.jacobian[i][c] / dt;
            }
            if with_hessian {
                for c in 0..6 {
                    for d in 0..6 {
                        term.hess[i][c][d] = -a.hessian[i][c][d] / dt;
                        term.hess[i][6 + c][6 + d] = b.hessian[i][c][d] / dt;
                    }
                }
            }
        }
        sink(4, &term);
    }
}

fn check_z(z: &[f64], horizon: &Horizon) -> Result<()> {
    check_len("decision vector", horizon.layout().dim(), z.len())
}

/// Joint torques `τ_k` at every knot where an acceleration exists.
pub fn torque_profile(z: &[f64], horizon: &Horizon, arm: &ArmParams) -> Result<Vec<[f64; 2]>> {
    check_z(z, horizon)?;
    let lay = horizon.layout();
    Ok((0..lay.n - 1)
        .map(|k| inverse_dynamics(&state_at(z, &lay, k), arm))
        .collect())
}

pub fn basis_values(z: &[f64], horizon: &Horizon, arm: &ArmParams) -> Result<[f64; NUM_BASIS]> {
    check_z(z, horizon)?;
    let mut values = [0.0; NUM_BASIS];
    for_each_term(z, horizon, arm, false, |b, t| values[b] += t.value());
    Ok(values)
}

pub fn basis_first_derivatives(
    z: &[f64],
    horizon: &Horizon,
    arm: &ArmParams,
) -> Result<Vec<Vec<f64>>> {
    check_z(z, horizon)?;
    let dim = z.len();
    let mut grads = vec![vec![0.0; dim]; NUM_BASIS];
    for_each_term(z, horizon, arm, false, |b, t| t.add_gradient(1.0, &mut grads[b]));
    Ok(grads)
}

pub fn basis_second_derivatives(
    z: &[f64],
    horizon: &Horizon,
    arm: &ArmParams,
) -> Result<Vec<CsrMatrix>> {
    check_z(z, horizon)?;
    let dim = z.len();
    let mut hess: Vec<Triplets> = (0..NUM_BASIS).map(|_| Triplets::new(dim, dim)).collect();
    for_each_term(z, horizon, arm, true, |b, t| t.add_hessian(1.0, &mut hess[b]));
    Ok(hess.iter().map(Triplets::to_csr).collect())
}

#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub hessian: Triplets,
}

/// `f(z; θ) = Σ θ_j φ_j(z)` with gradient and Hessian (as symmetric
/// triplets; every structural entry is emitted even for zero weights).
pub fn weighted_objective(
    z: &[f64],
    theta: &BehavioralParams,
    horizon: &Horizon,
    arm: &ArmParams,
) -> Result<ObjectiveEval> {
    check_z(z, horizon)?;
    let dim = z.len();
    let mut value = 0.0;
    let mut gradient = vec![0.0; dim];
    let mut hessian = Triplets::with_capacity(dim, dim, 200 * horizon.samples);
    for_each_term(z, horizon, arm, true, |b, t| {
        let w = theta.0[b];
        value += w * t.value();
        t.add_gradient(w, &mut gradient);
        t.add_hessian(w, &mut hessian);
    });
    Ok(ObjectiveEval {
        value,
        gradient,
        hessian,
    })
}

pub fn weighted_value(
    z: &[f64],
    theta: &BehavioralParams,
    horizon: &Horizon,
    arm: &ArmParams,
) -> Result<f64> {
    let phi = basis_values(z, horizon, arm)?;
    Ok(phi.iter().zip(&theta.0).map(|(p, t)| p * t).sum())
}

pub fn weighted_gradient(
    z: &[f64],
    theta: &BehavioralParams,
    horizon: &Horizon,
    arm: &ArmParams,
) -> Result<Vec<f64>> {
    check_z(z, horizon)?;
    let mut gradient = vec![0.0; z.len()];
    for_each_term(z, horizon, arm, false, |b, t| {
        t.add_gradient(theta.0[b], &mut gradient)
    });
    Ok(gradient)
}

/// `∂_θ(∇_z f)`: column `j` is `∇_z φ_j`. Independent of θ since `f` is
/// linear in the weights.
pub fn theta_mixed_jacobian(z: &[f64], horizon: &Horizon, arm: &ArmParams) -> Result<Vec<Vec<f64>>> {
    basis_first_derivatives(z, horizon, arm)
}
