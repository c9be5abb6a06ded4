//! Direct Euler transcription of the reaching problem into an
//! equality-constrained NLP.
//!
//! Decision vector layout (`z`): all joint positions `q_0..q_N`, then
//! velocities `dq_0..dq_{N-1}`, then accelerations `ddq_0..ddq_{N-2}`, each
//! knot stored as two consecutive joint values. Dimension `6N`.
//!
//! Constraint rows, in this fixed order:
//! 1. `q_{k+1} - q_k - dt dq_k`, `k = 0..N-1` (2N rows)
//! 2. `dq_{k+1} - dq_k - dt ddq_k`, `k = 0..N-2` (2(N-1) rows)
//! 3. `q_0 - q_init` (2 rows)
//! 4. `FK(q_N) - p_goal` (2 rows)

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arm::{fk_derivatives, forward_kinematics, ArmParams};
use crate::error::{check_len, Error, Result};
use crate::sparse::{CsrMatrix, Triplets};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Horizon {
    pub t0: f64,
    pub tf: f64,
    /// Number of Euler intervals `N`.
    pub samples: usize,
}

impl Default for Horizon {
    fn default() -> Self {
        Horizon {
            t0: 0.0,
            tf: 1.2,
            samples: 120,
        }
    }
}

impl Horizon {
    pub fn new(t0: f64, tf: f64, samples: usize) -> Result<Self> {
        let h = Horizon { t0, tf, samples };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tf > self.t0) || !self.t0.is_finite() || !self.tf.is_finite() {
            return Err(Error::Config(format!(
                "horizon needs tf > t0 (got t0={}, tf={})",
                self.t0, self.tf
            )));
        }
        if self.samples < 3 {
            return Err(Error::Config(format!(
                "horizon needs at least 3 samples (got {})",
                self.samples
            )));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        (self.tf - self.t0) / self.samples as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + self.dt() * k as f64
    }

    pub fn layout(&self) -> Layout {
        Layout { n: self.samples }
    }
}

/// Index arithmetic for the packed decision vector and the constraint rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub n: usize,
}

impl Layout {
    pub fn dim(&self) -> usize {
        6 * self.n
    }

    pub fn num_constraints(&self) -> usize {
        4 * self.n + 2
    }

    pub fn q(&self, k: usize, joint: usize) -> usize {
        debug_assert!(k <= self.n);
        2 * k + joint
    }

    pub fn dq(&self, k: usize, joint: usize) -> usize {
        debug_assert!(k < self.n);
        2 * (self.n + 1) + 2 * k + joint
    }

    pub fn ddq(&self, k: usize, joint: usize) -> usize {
        debug_assert!(k + 1 < self.n);
        4 * self.n + 2 + 2 * k + joint
    }

    pub fn position_row(&self, k: usize, joint: usize) -> usize {
        2 * k + joint
    }

    pub fn velocity_row(&self, k: usize, joint: usize) -> usize {
        2 * self.n + 2 * k + joint
    }

    pub fn initial_row(&self, joint: usize) -> usize {
        4 * self.n - 2 + joint
    }

    pub fn goal_row(&self, joint: usize) -> usize {
        4 * self.n + joint
    }

    /// Range of `z` holding the joint positions.
    pub fn q_range(&self) -> std::ops::Range<usize> {
        0..2 * (self.n + 1)
    }
}

/// Task setup: initial joint configuration and end-effector goal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvironmentParams {
    pub q_init: [f64; 2],
    pub p_goal: [f64; 2],
}

impl Default for EnvironmentParams {
    /// Slightly flexed arm hanging from the shoulder, reaching to a point in
    /// front of the body.
    fn default() -> Self {
        EnvironmentParams {
            q_init: [-std::f64::consts::FRAC_PI_2 + 0.1, -0.1],
            p_goal: [1.5, 0.6],
        }
    }
}

impl EnvironmentParams {
    pub fn validate(&self, arm: &ArmParams) -> Result<()> {
        let [l1, l2] = arm.segment_lengths;
        let r = self.p_goal[0].hypot(self.p_goal[1]);
        if !(r <= l1 + l2 && r >= (l1 - l2).abs()) {
            return Err(Error::UnreachableTarget {
                x: self.p_goal[0],
                y: self.p_goal[1],
            });
        }
        if !self.q_init.iter().all(|v| v.is_finite()) {
            return Err(Error::Config("q_init must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryVariables {
    /// `N + 1` position knots.
    pub q: Vec<[f64; 2]>,
    /// `N` velocity knots.
    pub dq: Vec<[f64; 2]>,
    /// `N - 1` acceleration knots.
    pub ddq: Vec<[f64; 2]>,
}

impl TrajectoryVariables {
    pub fn zeros(horizon: &Horizon) -> Self {
        let n = horizon.samples;
        TrajectoryVariables {
            q: vec![[0.0; 2]; n + 1],
            dq: vec![[0.0; 2]; n],
            ddq: vec![[0.0; 2]; n - 1],
        }
    }

    pub fn samples(&self) -> usize {
        self.dq.len()
    }

    fn check(&self, horizon: &Horizon) -> Result<()> {
        let n = horizon.samples;
        check_len("position knots", n + 1, self.q.len())?;
        check_len("velocity knots", n, self.dq.len())?;
        check_len("acceleration knots", n - 1, self.ddq.len())
    }

    pub fn pack(&self) -> Vec<f64> {
        self.q
            .iter()
            .chain(&self.dq)
            .chain(&self.ddq)
            .flat_map(|k| k.iter().copied())
            .collect()
    }

    pub fn unpack(z: &[f64], horizon: &Horizon) -> Result<Self> {
        let lay = horizon.layout();
        check_len("decision vector", lay.dim(), z.len())?;
        let n = lay.n;
        let knots = |range: std::ops::Range<usize>| -> Vec<[f64; 2]> {
            z[range].chunks_exact(2).map(|c| [c[0], c[1]]).collect()
        };
        Ok(TrajectoryVariables {
            q: knots(0..2 * (n + 1)),
            dq: knots(2 * (n + 1)..4 * n + 2),
            ddq: knots(4 * n + 2..6 * n),
        })
    }

    /// Euler rollout from `q_init` with the given initial velocity and
    /// acceleration sequence (`N - 1` knots).
    pub fn rollout(q_init: [f64; 2], dq0: [f64; 2], ddq: &[[f64; 2]], horizon: &Horizon) -> Result<Self> {
        let n = horizon.samples;
        check_len("acceleration knots", n - 1, ddq.len())?;
        let dt = horizon.dt();
        let mut dq = Vec::with_capacity(n);
        dq.push(dq0);
        for a in ddq {
            let v = *dq.last().unwrap();
            dq.push([v[0] + dt * a[0], v[1] + dt * a[1]]);
        }
        let mut q = Vec::with_capacity(n + 1);
        q.push(q_init);
        for v in &dq {
            let p = *q.last().unwrap();
            q.push([p[0] + dt * v[0], p[1] + dt * v[1]]);
        }
        Ok(TrajectoryVariables {
            q,
            dq,
            ddq: ddq.to_vec(),
        })
    }

    /// One row per knot (`t, q1, q2, dq1, dq2, ddq1, ddq2`); knots past the
    /// end of the velocity or acceleration sequences have empty fields.
    pub fn write_csv<W: Write>(&self, horizon: &Horizon, out: W) -> Result<()> {
        self.check(horizon)?;
        let mut w = csv::Writer::from_writer(out);
        let to_err = |e: csv::Error| Error::Config(format!("csv: {e}"));
        w.write_record(["t", "q1", "q2", "dq1", "dq2", "ddq1", "ddq2"])
            .map_err(to_err)?;
        let fmt_pair = |v: Option<&[f64; 2]>| match v {
            Some(p) => [p[0].to_string(), p[1].to_string()],
            None => [String::new(), String::new()],
        };
        for (k, q) in self.q.iter().enumerate() {
            let [dq1, dq2] = fmt_pair(self.dq.get(k));
            let [a1, a2] = fmt_pair(self.ddq.get(k));
            w.write_record([
                horizon.time(k).to_string(),
                q[0].to_string(),
                q[1].to_string(),
                dq1,
                dq2,
                a1,
                a2,
            ])
            .map_err(to_err)?;
        }
        w.flush().map_err(|e| Error::Config(format!("csv: {e}")))?;
        Ok(())
    }

    pub fn save_csv(&self, horizon: &Horizon, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(horizon, std::io::BufWriter::new(file))
    }
}

/// One reaching task: arm, time grid and environment.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ReachingTask {
    pub arm: ArmParams,
    pub horizon: Horizon,
    pub env: EnvironmentParams,
}

impl ReachingTask {
    pub fn new(arm: ArmParams, horizon: Horizon, env: EnvironmentParams) -> Result<Self> {
        arm.validate()?;
        horizon.validate()?;
        env.validate(&arm)?;
        Ok(ReachingTask { arm, horizon, env })
    }

    pub fn layout(&self) -> Layout {
        self.horizon.layout()
    }

    pub fn dim(&self) -> usize {
        self.layout().dim()
    }

    pub fn num_constraints(&self) -> usize {
        self.layout().num_constraints()
    }

    pub fn constraints(&self, z: &[f64]) -> Result<Vec<f64>> {
        constraints(z, &self.env, &self.horizon, &self.arm)
    }

    pub fn constraints_jacobian(&self, z: &[f64]) -> Result<CsrMatrix> {
        constraints_jacobian(z, &self.env, &self.horizon, &self.arm)
    }
}

/// Equality-constraint residuals `h(z; x)`.
pub fn constraints(
    z: &[f64],
    env: &EnvironmentParams,
    horizon: &Horizon,
    arm: &ArmParams,
) -> Result<Vec<f64>> {
    let lay = horizon.layout();
    check_len("decision vector", lay.dim(), z.len())?;
    let n = lay.n;
    let dt = horizon.dt();
    let mut h = vec![0.0; lay.num_constraints()];
    for k in 0..n {
        for j in 0..2 {
            h[lay.position_row(k, j)] = z[lay.q(k + 1, j)] - z[lay.q(k, j)] - dt * z[lay.dq(k, j)];
        }
    }
    for k in 0..n - 1 {
        for j in 0..2 {
            h[lay.velocity_row(k, j)] =
                z[lay.dq(k + 1, j)] - z[lay.dq(k, j)] - dt * z[lay.ddq(k, j)];
        }
    }
    for j in 0..2 {
        h[lay.initial_row(j)] = z[lay.q(0, j)] - env.q_init[j];
    }
    let p = forward_kinematics([z[lay.q(n, 0)], z[lay.q(n, 1)]], arm);
    for j in 0..2 {
        h[lay.goal_row(j)] = p[j] - env.p_goal[j];
    }
    Ok(h)
}

/// Exact constraint Jacobian `∂h/∂z`. All rows except the two goal rows are
/// constant.
pub fn constraints_jacobian(
    z: &[f64],
    _env: &EnvironmentParams,
    horizon: &Horizon,
    arm: &ArmParams,
) -> Result<CsrMatrix> {
    let lay = horizon.layout();
    check_len("decision vector", lay.dim(), z.len())?;
    let n = lay.n;
    let dt = horizon.dt();
    let mut t = Triplets::with_capacity(lay.num_constraints(), lay.dim(), 12 * n + 8);
    for k in 0..n {
        for j in 0..2 {
            let r = lay.position_row(k, j);
            t.push(r, lay.q(k + 1, j), 1.0);
            t.push(r, lay.q(k, j), -1.0);
            t.push(r, lay.dq(k, j), -dt);
        }
    }
    for k in 0..n - 1 {
        for j in 0..2 {
            let r = lay.velocity_row(k, j);
            t.push(r, lay.dq(k + 1, j), 1.0);
            t.push(r, lay.dq(k, j), -1.0);
            t.push(r, lay.ddq(k, j), -dt);
        }
    }
    for j in 0..2 {
        t.push(lay.initial_row(j), lay.q(0, j), 1.0);
    }
    let fk = fk_derivatives([z[lay.q(n, 0)], z[lay.q(n, 1)]], arm);
    for i in 0..2 {
        for j in 0..2 {
            t.push(lay.goal_row(i), lay.q(n, j), fk.jacobian[i][j]);
        }
    }
    Ok(t.to_csr())
}

/// `Σ_j ν_j ∇²h_j`, returned as symmetric triplets (only the final position
/// knot carries curvature).
pub fn constraints_weighted_hessian_triplets(
    z: &[f64],
    nu: &[f64],
    horizon: &Horizon,
    arm: &ArmParams,
) -> Result<Triplets> {
    let lay = horizon.layout();
    check_len("decision vector", lay.dim(), z.len())?;
    check_len("multipliers", lay.num_constraints(), nu.len())?;
    let n = lay.n;
    let fk = fk_derivatives([z[lay.q(n, 0)], z[lay.q(n, 1)]], arm);
    let w = [nu[lay.goal_row(0)], nu[lay.goal_row(1)]];
    let mut t = Triplets::with_capacity(lay.dim(), lay.dim(), 4);
    for a in 0..2 {
        for b in 0..2 {
            let v = w[0] * fk.second[0][a][b] + w[1] * fk.second[1][a][b];
            t.push(lay.q(n, a), lay.q(n, b), v);
        }
    }
    Ok(t)
}

pub fn constraints_weighted_hessian(
    z: &[f64],
    _env: &EnvironmentParams,
    nu: &[f64],
    horizon: &Horizon,
    arm: &ArmParams,
) -> Result<CsrMatrix> {
    Ok(constraints_weighted_hessian_triplets(z, nu, horizon, arm)?.to_csr())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Horizon {
        Horizon::new(0.0, 0.3, 3).unwrap()
    }

    #[test]
    fn paper_horizon_dimensions() {
        let h = Horizon::default();
        assert!((h.dt() - 0.01).abs() < 1e-15);
        let lay = h.layout();
        assert_eq!(lay.dim(), 720);
        assert_eq!(lay.num_constraints(), 482);
        assert_eq!(TrajectoryVariables::zeros(&h).pack().len(), 720);
    }

    #[test]
    fn zero_trajectory_packs_to_zero_vector() {
        let z = TrajectoryVariables::zeros(&small()).pack();
        assert_eq!(z, vec![0.0; 18]);
    }

    #[test]
    fn unpack_rejects_wrong_length() {
        assert!(matches!(
            TrajectoryVariables::unpack(&[0.0; 17], &small()),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(constraints(&[0.0; 5], &EnvironmentParams::default(), &small(), &ArmParams::default()).is_err());
    }

    #[test]
    fn horizon_validation() {
        assert!(Horizon::new(0.0, 1.0, 2).is_err());
        assert!(Horizon::new(1.0, 1.0, 10).is_err());
    }

    #[test]
    fn static_posture_is_feasible() {
        let arm = ArmParams::default();
        let h = Horizon::default();
        let env0 = EnvironmentParams::default();
        let env = EnvironmentParams {
            q_init: env0.q_init,
            p_goal: forward_kinematics(env0.q_init, &arm),
        };
        let mut traj = TrajectoryVariables::zeros(&h);
        traj.q.iter_mut().for_each(|q| *q = env.q_init);
        let r = constraints(&traj.pack(), &env, &h, &arm).unwrap();
        assert!(r.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn rollout_landing_on_goal_is_feasible() {
        let arm = ArmParams::default();
        let h = Horizon::new(0.0, 0.5, 10).unwrap();
        let ddq: Vec<[f64; 2]> = (0..9).map(|k| [0.3 * k as f64, -0.2]).collect();
        let traj = TrajectoryVariables::rollout([0.1, 0.4], [0.5, -0.1], &ddq, &h).unwrap();
        let env = EnvironmentParams {
            q_init: [0.1, 0.4],
            p_goal: forward_kinematics(*traj.q.last().unwrap(), &arm),
        };
        let r = constraints(&traj.pack(), &env, &h, &arm).unwrap();
        assert!(r.iter().all(|v| v.abs() < 1e-14), "{r:?}");
    }

    #[test]
    fn velocity_perturbation_touches_two_rows() {
        let arm = ArmParams::default();
        let h = Horizon::new(0.0, 0.5, 10).unwrap();
        let lay = h.layout();
        let env = EnvironmentParams::default();
        let z: Vec<f64> = (0..lay.dim()).map(|i| (i as f64 * 0.37).sin()).collect();
        let base = constraints(&z, &env, &h, &arm).unwrap();
        let delta = 0.25;
        let k = 4;
        let mut zp = z.clone();
        zp[lay.dq(k, 1)] += delta;
        let pert = constraints(&zp, &env, &h, &arm).unwrap();
        for (row, (a, b)) in base.iter().zip(&pert).enumerate() {
            let diff = b - a;
            if row == lay.position_row(k, 1) {
                assert!((diff + h.dt() * delta).abs() < 1e-14);
            } else if row == lay.velocity_row(k, 1) {
                assert!((diff + delta).abs() < 1e-14);
            } else if row == lay.velocity_row(k - 1, 1) {
                assert!((diff - delta).abs() < 1e-14);
            } else {
                assert_eq!(diff, 0.0, "row {row}");
            }
        }
    }

    #[test]
    fn jacobian_shape_and_linear_rows() {
        let arm = ArmParams::default();
        let h = Horizon::default();
        let lay = h.layout();
        let env = EnvironmentParams::default();
        let z1: Vec<f64> = (0..lay.dim()).map(|i| (i as f64).cos()).collect();
        let z2: Vec<f64> = (0..lay.dim()).map(|i| (i as f64 * 1.3).sin()).collect();
        let j1 = constraints_jacobian(&z1, &env, &h, &arm).unwrap();
        let j2 = constraints_jacobian(&z2, &env, &h, &arm).unwrap();
        assert_eq!((j1.nrows(), j1.ncols()), (482, 720));
        for r in 0..lay.goal_row(0) {
            assert_eq!(j1.row(r).collect::<Vec<_>>(), j2.row(r).collect::<Vec<_>>());
        }
        for r in 0..j1.nrows() {
            assert!(j1.row_nnz(r) <= 6);
        }
    }

    #[test]
    fn hessian_vanishes_without_goal_multipliers() {
        let arm = ArmParams::default();
        let h = small();
        let lay = h.layout();
        let z: Vec<f64> = (0..lay.dim()).map(|i| i as f64 * 0.1).collect();
        let mut nu = vec![1.0; lay.num_constraints()];
        nu[lay.goal_row(0)] = 0.0;
        nu[lay.goal_row(1)] = 0.0;
        let m = constraints_weighted_hessian(&z, &EnvironmentParams::default(), &nu, &h, &arm).unwrap();
        assert!(m.values().iter().all(|v| *v == 0.0));
        nu[lay.goal_row(0)] = 0.7;
        nu[lay.goal_row(1)] = -1.3;
        let m = constraints_weighted_hessian(&z, &EnvironmentParams::default(), &nu, &h, &arm).unwrap();
        assert_eq!(m.asymmetry(), 0.0);
    }

    #[test]
    fn csv_dump_has_empty_trailing_fields() {
        let h = small();
        let mut buf = Vec::new();
        TrajectoryVariables::zeros(&h).write_csv(&h, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0], "t,q1,q2,dq1,dq2,ddq1,ddq2");
        assert!(lines[3].ends_with(",0,0,,"));
        assert!(lines[4].ends_with(",0,0,,,,"));
    }
}
