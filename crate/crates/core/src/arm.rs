//! Planar two-link arm: forward/inverse kinematics and closed-form inverse
//! dynamics with exact first and second derivatives.
//!
//! Joint angles are measured counterclockwise, `q = (0, 0)` is the arm
//! stretched along +x, and the second angle is relative to the first link.
//! Gravity acts along -y.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Geometric and inertial parameters of the arm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArmParams {
    pub segment_lengths: [f64; 2],
    /// Centre-of-mass offset of each link along its own axis.
    pub com_offsets: [f64; 2],
    pub masses: [f64; 2],
    /// Moment of inertia about the centre of mass, axis normal to the plane.
    pub inertias: [f64; 2],
    pub gravity: f64,
}

impl Default for ArmParams {
    /// Unit-length, unit-mass uniform sticks.
    fn default() -> Self {
        ArmParams {
            segment_lengths: [1.0, 1.0],
            com_offsets: [0.5, 0.5],
            masses: [1.0, 1.0],
            inertias: [1.0 / 12.0, 1.0 / 12.0],
            gravity: 9.81,
        }
    }
}

impl ArmParams {
    pub fn validate(&self) -> Result<()> {
        let positive = self
            .segment_lengths
            .iter()
            .chain(&self.com_offsets)
            .chain(&self.masses)
            .chain(&self.inertias)
            .all(|v| v.is_finite() && *v > 0.0);
        if !positive || !self.gravity.is_finite() {
            return Err(Error::Config(
                "arm lengths, offsets, masses and inertias must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn reach(&self) -> f64 {
        self.segment_lengths[0] + self.segment_lengths[1]
    }

    /// Lumped coefficients of the closed-form dynamics.
    fn coefficients(&self) -> Coefficients {
        let [l1, _] = self.segment_lengths;
        let [c1, c2] = self.com_offsets;
        let [m1, m2] = self.masses;
        let [i1, i2] = self.inertias;
        let g = self.gravity;
        Coefficients {
            k11: i1 + i2 + m1 * c1 * c1 + m2 * (l1 * l1 + c2 * c2),
            k12: i2 + m2 * c2 * c2,
            alpha: m2 * l1 * c2,
            beta1: (m1 * c1 + m2 * l1) * g,
            beta2: m2 * c2 * g,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Coefficients {
    k11: f64,
    k12: f64,
    alpha: f64,
    beta1: f64,
    beta2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct JointState {
    pub q: [f64; 2],
    pub dq: [f64; 2],
    pub ddq: [f64; 2],
}

impl JointState {
    pub fn new(q: [f64; 2], dq: [f64; 2], ddq: [f64; 2]) -> Self {
        JointState { q, dq, ddq }
    }

    pub fn is_finite(&self) -> bool {
        self.q
            .iter()
            .chain(&self.dq)
            .chain(&self.ddq)
            .all(|v| v.is_finite())
    }

    /// Flattened as `(q1, q2, dq1, dq2, ddq1, ddq2)`.
    pub fn to_array(&self) -> [f64; 6] {
        [
            self.q[0], self.q[1], self.dq[0], self.dq[1], self.ddq[0], self.ddq[1],
        ]
    }

    pub fn from_array(x: [f64; 6]) -> Self {
        JointState {
            q: [x[0], x[1]],
            dq: [x[2], x[3]],
            ddq: [x[4], x[5]],
        }
    }
}

/// Which of the two inverse-kinematics solutions to return.
///
/// `ElbowDown` has a non-negative elbow angle (the elbow sits clockwise of the
/// shoulder-target chord), `ElbowUp` a non-positive one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ElbowBranch {
    ElbowUp,
    ElbowDown,
}

pub fn forward_kinematics(q: [f64; 2], params: &ArmParams) -> [f64; 2] {
    let [l1, l2] = params.segment_lengths;
    let s = q[0] + q[1];
    [
        l1 * q[0].cos() + l2 * s.cos(),
        l1 * q[0].sin() + l2 * s.sin(),
    ]
}

/// Analytic derivatives of [`forward_kinematics`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FkDerivatives {
    /// `jacobian[i][j] = ∂p_i/∂q_j`
    pub jacobian: [[f64; 2]; 2],
    /// `second[i][j][k] = ∂²p_i/∂q_j∂q_k`
    pub second: [[[f64; 2]; 2]; 2],
}

pub fn fk_derivatives(q: [f64; 2], params: &ArmParams) -> FkDerivatives {
    let [l1, l2] = params.segment_lengths;
    let (s1, c1) = q[0].sin_cos();
    let (s12, c12) = (q[0] + q[1]).sin_cos();
    let jacobian = [
        [-l1 * s1 - l2 * s12, -l2 * s12],
        [l1 * c1 + l2 * c12, l2 * c12],
    ];
    let px = [[-l1 * c1 - l2 * c12, -l2 * c12], [-l2 * c12, -l2 * c12]];
    let py = [[-l1 * s1 - l2 * s12, -l2 * s12], [-l2 * s12, -l2 * s12]];
    FkDerivatives {
        jacobian,
        second: [px, py],
    }
}

/// Joint torques `τ = M(q) q̈ + C(q, q̇) + G(q)`.
pub fn inverse_dynamics(state: &JointState, params: &ArmParams) -> [f64; 2] {
    let k = params.coefficients();
    let [q1, q2] = state.q;
    let [v1, v2] = state.dq;
    let [a1, a2] = state.ddq;
    let (s2, c2) = q2.sin_cos();
    let cs = (q1 + q2).cos();
    let m11 = k.k11 + 2.0 * k.alpha * c2;
    let m12 = k.k12 + k.alpha * c2;
    let h = k.alpha * s2;
    [
        m11 * a1 + m12 * a2 - h * (2.0 * v1 * v2 + v2 * v2) + k.beta1 * q1.cos() + k.beta2 * cs,
        m12 * a1 + k.k12 * a2 + h * v1 * v1 + k.beta2 * cs,
    ]
}

/// Mass matrix `M(q)`.
pub fn mass_matrix(q: [f64; 2], params: &ArmParams) -> [[f64; 2]; 2] {
    let k = params.coefficients();
    let c2 = q[1].cos();
    let m12 = k.k12 + k.alpha * c2;
    [[k.k11 + 2.0 * k.alpha * c2, m12], [m12, k.k12]]
}

/// Torque together with its derivatives with respect to the flattened state
/// `(q1, q2, dq1, dq2, ddq1, ddq2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TorqueDerivatives {
    pub torque: [f64; 2],
    /// `jacobian[i][j] = ∂τ_i/∂x_j`
    pub jacobian: [[f64; 6]; 2],
    /// `hessian[i][j][k] = ∂²τ_i/∂x_j∂x_k`
    pub hessian: [[[f64; 6]; 6]; 2],
}

impl TorqueDerivatives {
    /// `∂τ/∂q̈`, which equals the mass matrix.
    pub fn d_ddq(&self) -> [[f64; 2]; 2] {
        self.block(4)
    }

    pub fn d_dq(&self) -> [[f64; 2]; 2] {
        self.block(2)
    }

    pub fn d_q(&self) -> [[f64; 2]; 2] {
        self.block(0)
    }

    fn block(&self, offset: usize) -> [[f64; 2]; 2] {
        let j = &self.jacobian;
        [
            [j[0][offset], j[0][offset + 1]],
            [j[1][offset], j[1][offset + 1]],
        ]
    }
}

pub fn inverse_dynamics_derivatives(state: &JointState, params: &ArmParams) -> TorqueDerivatives {
    const Q1: usize = 0;
    const Q2: usize = 1;
    const V1: usize = 2;
    const V2: usize = 3;
    const A1: usize = 4;
    const A2: usize = 5;

    let k = params.coefficients();
    let [q1, q2] = state.q;
    let [v1, v2] = state.dq;
    let [a1, a2] = state.ddq;
    let (s1, c1) = q1.sin_cos();
    let (s2, c2) = q2.sin_cos();
    let (ss, cs) = (q1 + q2).sin_cos();
    let al = k.alpha;
    let m11 = k.k11 + 2.0 * al * c2;
    let m12 = k.k12 + al * c2;
    let h = al * s2;
    let coriolis = 2.0 * v1 * v2 + v2 * v2;

    let torque = [
        m11 * a1 + m12 * a2 - h * coriolis + k.beta1 * c1 + k.beta2 * cs,
        m12 * a1 + k.k12 * a2 + h * v1 * v1 + k.beta2 * cs,
    ];

    let mut jac = [[0.0; 6]; 2];
    jac[0][Q1] = -k.beta1 * s1 - k.beta2 * ss;
    jac[0][Q2] = -al * s2 * (2.0 * a1 + a2) - al * c2 * coriolis - k.beta2 * ss;
    jac[0][V1] = -2.0 * h * v2;
    jac[0][V2] = -2.0 * h * (v1 + v2);
    jac[0][A1] = m11;
    jac[0][A2] = m12;

    jac[1][Q1] = -k.beta2 * ss;
    jac[1][Q2] = -al * s2 * a1 + al * c2 * v1 * v1 - k.beta2 * ss;
    jac[1][V1] = 2.0 * h * v1;
    jac[1][V2] = 0.0;
    jac[1][A1] = m12;
    jac[1][A2] = k.k12;

    let mut hess = [[[0.0; 6]; 6]; 2];
    {
        let t = &mut hess[0];
        let mut set = |i: usize, j: usize, v: f64| {
            t[i][j] = v;
            t[j][i] = v;
        };
        set(Q1, Q1, -k.beta1 * c1 - k.beta2 * cs);
        set(Q1, Q2, -k.beta2 * cs);
        set(
            Q2,
            Q2,
            -al * c2 * (2.0 * a1 + a2) + al * s2 * coriolis - k.beta2 * cs,
        );
        set(Q2, V1, -2.0 * al * c2 * v2);
        set(Q2, V2, -2.0 * al * c2 * (v1 + v2));
        set(Q2, A1, -2.0 * al * s2);
        set(Q2, A2, -al * s2);
        set(V1, V2, -2.0 * h);
        set(V2, V2, -2.0 * h);
    }
    {
        let t = &mut hess[1];
        let mut set = |i: usize, j: usize, v: f64| {
            t[i][j] = v;
            t[j][i] = v;
        };
        set(Q1, Q1, -k.beta2 * cs);
        set(Q1, Q2, -k.beta2 * cs);
        set(Q2, Q2, -al * c2 * a1 - al * s2 * v1 * v1 - k.beta2 * cs);
        set(Q2, V1, 2.0 * al * c2 * v1);
        set(Q2, A1, -al * s2);
        set(V1, V1, 2.0 * h);
    }

    TorqueDerivatives {
        torque,
        jacobian: jac,
        hessian: hess,
    }
}

/// End-effector velocity `v = J(q) q̇` with derivatives with respect to the
/// flattened `(q1, q2, dq1, dq2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VelocityDerivatives {
    pub velocity: [f64; 2],
    pub jacobian: [[f64; 4]; 2],
    pub hessian: [[[f64; 4]; 4]; 2],
}

pub fn end_effector_velocity(q: [f64; 2], dq: [f64; 2], params: &ArmParams) -> [f64; 2] {
    let j = fk_derivatives(q, params).jacobian;
    [
        j[0][0] * dq[0] + j[0][1] * dq[1],
        j[1][0] * dq[0] + j[1][1] * dq[1],
    ]
}

pub fn end_effector_velocity_derivatives(
    q: [f64; 2],
    dq: [f64; 2],
    params: &ArmParams,
) -> VelocityDerivatives {
    let [l1, l2] = params.segment_lengths;
    let (s1, c1) = q[0].sin_cos();
    let (s12, c12) = (q[0] + q[1]).sin_cos();
    let [w1, w2] = dq;
    let w = w1 + w2;

    let velocity = [-l1 * s1 * w1 - l2 * s12 * w, l1 * c1 * w1 + l2 * c12 * w];
    let jacobian = [
        [
            -l1 * c1 * w1 - l2 * c12 * w,
            -l2 * c12 * w,
            -l1 * s1 - l2 * s12,
            -l2 * s12,
        ],
        [
            -l1 * s1 * w1 - l2 * s12 * w,
            -l2 * s12 * w,
            l1 * c1 + l2 * c12,
            l2 * c12,
        ],
    ];
    let vx = [
        [
            l1 * s1 * w1 + l2 * s12 * w,
            l2 * s12 * w,
            -l1 * c1 - l2 * c12,
            -l2 * c12,
        ],
        [l2 * s12 * w, l2 * s12 * w, -l2 * c12, -l2 * c12],
        [-l1 * c1 - l2 * c12, -l2 * c12, 0.0, 0.0],
        [-l2 * c12, -l2 * c12, 0.0, 0.0],
    ];
    let vy = [
        [
            -l1 * c1 * w1 - l2 * c12 * w,
            -l2 * c12 * w,
            -l1 * s1 - l2 * s12,
            -l2 * s12,
        ],
        [-l2 * c12 * w, -l2 * c12 * w, -l2 * s12, -l2 * s12],
        [-l1 * s1 - l2 * s12, -l2 * s12, 0.0, 0.0],
        [-l2 * s12, -l2 * s12, 0.0, 0.0],
    ];
    VelocityDerivatives {
        velocity,
        jacobian,
        hessian: [vx, vy],
    }
}

/// Closed-form inverse kinematics.
pub fn inverse_kinematics(p: [f64; 2], branch: ElbowBranch, params: &ArmParams) -> Result<[f64; 2]> {
    let [l1, l2] = params.segment_lengths;
    let r2 = p[0] * p[0] + p[1] * p[1];
    let r = r2.sqrt();
    let slack = 1e-12 * params.reach();
    if !r.is_finite() || r > l1 + l2 + slack || r < (l1 - l2).abs() - slack {
        return Err(Error::UnreachableTarget { x: p[0], y: p[1] });
    }
    let cos_elbow = ((r2 - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)).clamp(-1.0, 1.0);
    let elbow = match branch {
        ElbowBranch::ElbowDown => cos_elbow.acos(),
        ElbowBranch::ElbowUp => -cos_elbow.acos(),
    };
    let shoulder = p[1].atan2(p[0]) - (l2 * elbow.sin()).atan2(l1 + l2 * elbow.cos());
    Ok([shoulder, elbow])
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn default_params_are_unit_sticks() {
        let p = ArmParams::default();
        assert_eq!(p.segment_lengths, [1.0, 1.0]);
        assert_eq!(p.com_offsets, [0.5, 0.5]);
        assert_eq!(p.masses, [1.0, 1.0]);
        assert_eq!(p.inertias, [1.0 / 12.0, 1.0 / 12.0]);
        assert_eq!(p.gravity, 9.81);
        p.validate().unwrap();
    }

    #[test]
    fn fk_reference_points() {
        let p = ArmParams::default();
        let a = forward_kinematics([0.0, 0.0], &p);
        assert!(close(a[0], 2.0, 1e-15) && close(a[1], 0.0, 1e-15));
        let b = forward_kinematics([FRAC_PI_2, 0.0], &p);
        assert!(close(b[0], 0.0, 1e-15) && close(b[1], 2.0, 1e-15));
        // Hanging, slightly flexed start posture: (sin 0.1, -cos 0.1 - 1).
        let c = forward_kinematics([-FRAC_PI_2 + 0.1, -0.1], &p);
        assert!(close(c[0], 0.099_833_416_646_828_15, 1e-12));
        assert!(close(c[1], -1.995_004_165_278_025_8, 1e-12));
    }

    #[test]
    fn fk_jacobian_at_zero() {
        let d = fk_derivatives([0.0, 0.0], &ArmParams::default());
        assert_eq!(d.jacobian[0], [0.0, 0.0]);
        assert_eq!(d.jacobian[1], [2.0, 1.0]);
    }

    #[test]
    fn gravity_aligned_postures_need_no_torque() {
        let p = ArmParams::default();
        for q1 in [FRAC_PI_2, -FRAC_PI_2] {
            let tau = inverse_dynamics(&JointState::new([q1, 0.0], [0.0; 2], [0.0; 2]), &p);
            assert!(tau[0].abs() < 1e-12 && tau[1].abs() < 1e-12, "{tau:?}");
        }
    }

    #[test]
    fn horizontal_arm_gravity_torque() {
        let tau = inverse_dynamics(&JointState::default(), &ArmParams::default());
        assert!(close(tau[0], 19.62, 1e-12));
        assert!(close(tau[1], 4.905, 1e-12));
    }

    #[test]
    fn mass_matrix_column_from_unit_acceleration() {
        let state = JointState::new([-FRAC_PI_2, 0.0], [0.0; 2], [1.0, 0.0]);
        let tau = inverse_dynamics(&state, &ArmParams::default());
        assert!(close(tau[0], 8.0 / 3.0, 1e-12));
        assert!(close(tau[1], 5.0 / 6.0, 1e-12));
    }

    #[test]
    fn velocity_jacobian_vanishes_at_rest_in_zero_posture() {
        let d = inverse_dynamics_derivatives(&JointState::default(), &ArmParams::default());
        assert_eq!(d.d_dq(), [[0.0, 0.0], [0.0, 0.0]]);
    }

    #[test]
    fn ddq_block_is_mass_matrix() {
        let p = ArmParams::default();
        let s = JointState::new([0.3, -1.1], [0.4, 2.0], [1.0, -3.0]);
        let d = inverse_dynamics_derivatives(&s, &p);
        assert_eq!(d.d_ddq(), mass_matrix(s.q, &p));
        let m = d.d_ddq();
        assert_eq!(m[0][1], m[1][0]);
        assert!(m[0][0] > 0.0 && m[0][0] * m[1][1] - m[0][1] * m[1][0] > 0.0);
    }

    #[test]
    fn ik_boundary_and_unreachable() {
        let p = ArmParams::default();
        for b in [ElbowBranch::ElbowUp, ElbowBranch::ElbowDown] {
            let q = inverse_kinematics([2.0, 0.0], b, &p).unwrap();
            assert!(q[0].abs() < 1e-7 && q[1].abs() < 1e-7, "{q:?}");
        }
        assert!(matches!(
            inverse_kinematics([3.0, 0.0], ElbowBranch::ElbowDown, &p),
            Err(Error::UnreachableTarget { .. })
        ));
    }

    #[test]
    fn ik_round_trip_on_reaching_goal() {
        let p = ArmParams::default();
        let goal = [1.5, 0.6];
        let down = inverse_kinematics(goal, ElbowBranch::ElbowDown, &p).unwrap();
        let up = inverse_kinematics(goal, ElbowBranch::ElbowUp, &p).unwrap();
        assert!(down[1] > 0.0 && up[1] < 0.0);
        for q in [down, up] {
            let back = forward_kinematics(q, &p);
            assert!(close(back[0], goal[0], 1e-10) && close(back[1], goal[1], 1e-10));
        }
    }
}
