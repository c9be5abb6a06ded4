//! KKT vector of the reaching OCP and its Jacobians with respect to the
//! primal-dual pair and to the behavioral parameters.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::basis::{theta_mixed_jacobian, weighted_gradient, weighted_objective, BehavioralParams, NUM_BASIS};
use crate::error::{check_len, Error, Result};
use crate::sparse::{CsrMatrix, Triplets};
use crate::transcription::{constraints_weighted_hessian_triplets, ReachingTask};

/// A primal-dual pair with the ∞-norm of its KKT residual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KktPoint {
    pub z: Vec<f64>,
    pub nu: Vec<f64>,
    pub residual_norm: f64,
}

impl KktPoint {
    pub fn new(
        z: Vec<f64>,
        nu: Vec<f64>,
        theta: &BehavioralParams,
        task: &ReachingTask,
    ) -> Result<Self> {
        let r = kkt_vector(&z, &nu, theta, task)?;
        Ok(KktPoint {
            residual_norm: inf_norm(&r),
            z,
            nu,
        })
    }
}

pub(crate) fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn check_point(z: &[f64], nu: &[f64], task: &ReachingTask) -> Result<()> {
    check_len("decision vector", task.dim(), z.len())?;
    check_len("multipliers", task.num_constraints(), nu.len())
}

/// `𝒦 = [∇_z f + (∂_z h)ᵀ ν ; h]`
pub fn kkt_vector(
    z: &[f64],
    nu: &[f64],
    theta: &BehavioralParams,
    task: &ReachingTask,
) -> Result<Vec<f64>> {
    check_point(z, nu, task)?;
    let mut out = weighted_gradient(z, theta, &task.horizon, &task.arm)?;
    let jac = task.constraints_jacobian(z)?;
    for (o, v) in out.iter_mut().zip(jac.tr_mul_vec(nu)) {
        *o += v;
    }
    out.extend(task.constraints(z)?);
    Ok(out)
}

/// Primal-dual Jacobian in block form:
///
/// ```text
/// [ ∇²f + Σ ν_j ∇²h_j   (∂h)ᵀ ]
/// [ ∂h                   0    ]
/// ```
#[derive(Debug, Clone)]
pub struct KktJacobian {
    /// Upper-left block, stored in full (both triangles).
    pub hessian: CsrMatrix,
    /// Lower-left block `∂_z h`.
    pub constraint_jacobian: CsrMatrix,
}

impl KktJacobian {
    pub fn dim(&self) -> usize {
        self.hessian.nrows() + self.constraint_jacobian.nrows()
    }

    /// The full symmetric matrix; the lower-right block has no entries.
    pub fn to_triplets(&self) -> Triplets {
        let n = self.hessian.nrows();
        let mut t = Triplets::with_capacity(
            self.dim(),
            self.dim(),
            self.hessian.nnz() + 2 * self.constraint_jacobian.nnz(),
        );
        t.append_csr(&self.hessian, 0, 0, false);
        t.append_csr(&self.constraint_jacobian, n, 0, false);
        t.append_csr(&self.constraint_jacobian, 0, n, true);
        t
    }

    pub fn to_csr(&self) -> CsrMatrix {
        self.to_triplets().to_csr()
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        self.to_csr().to_dense()
    }
}

pub fn kkt_jacobian_primal_dual(
    z: &[f64],
    nu: &[f64],
    theta: &BehavioralParams,
    task: &ReachingTask,
) -> Result<KktJacobian> {
    check_point(z, nu, task)?;
    let obj = weighted_objective(z, theta, &task.horizon, &task.arm)?;
    let mut hess = obj.hessian;
    hess.append(
        &constraints_weighted_hessian_triplets(z, nu, &task.horizon, &task.arm)?,
        0,
        0,
        1.0,
    );
    Ok(KktJacobian {
        hessian: hess.to_csr(),
        constraint_jacobian: task.constraints_jacobian(z)?,
    })
}

/// `∂_θ 𝒦`: one column per basis weight, each of length `dim z + dim h`.
/// The bottom block is zero because the constraints do not depend on θ.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaJacobian {
    pub columns: Vec<Vec<f64>>,
}

impl ThetaJacobian {
    pub fn nrows(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }
}

pub fn kkt_jacobian_theta(
    z: &[f64],
    nu: &[f64],
    _theta: &BehavioralParams,
    task: &ReachingTask,
) -> Result<ThetaJacobian> {
    check_point(z, nu, task)?;
    let m = task.num_constraints();
    let mut columns = theta_mixed_jacobian(z, &task.horizon, &task.arm)?;
    for c in &mut columns {
        c.resize(c.len() + m, 0.0);
    }
    debug_assert_eq!(columns.len(), NUM_BASIS);
    Ok(ThetaJacobian { columns })
}

/// Writes a matrix in coordinate Matrix Market format (1-based indices).
pub fn write_matrix_market<W: Write>(out: &mut W, m: &CsrMatrix) -> std::io::Result<()> {
    writeln!(out, "%%MatrixMarket matrix coordinate real general")?;
    writeln!(out, "{} {} {}", m.nrows(), m.ncols(), m.nnz())?;
    for i in 0..m.nrows() {
        for (j, v) in m.row(i) {
            writeln!(out, "{} {} {:e}", i + 1, j + 1, v)?;
        }
    }
    Ok(())
}

/// Dumps `𝒦` (as a dense column) and both Jacobians into `dir`.
pub fn dump_kkt(
    dir: &std::path::Path,
    z: &[f64],
    nu: &[f64],
    theta: &BehavioralParams,
    task: &ReachingTask,
) -> Result<()> {
    let vector = kkt_vector(z, nu, theta, task)?;
    let pd = kkt_jacobian_primal_dual(z, nu, theta, task)?.to_csr();
    let th = kkt_jacobian_theta(z, nu, theta, task)?;
    let mut t = Triplets::new(th.nrows(), NUM_BASIS);
    for (j, col) in th.columns.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            if *v != 0.0 {
                t.push(i, j, *v);
            }
        }
    }
    let mut kv = Triplets::new(vector.len(), 1);
    for (i, v) in vector.iter().enumerate() {
        kv.push(i, 0, *v);
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, m) in [
        ("kkt_vector.mtx", kv.to_csr()),
        ("kkt_jacobian_primal_dual.mtx", pd),
        ("kkt_jacobian_theta.mtx", t.to_csr()),
    ] {
        let path = dir.join(name);
        let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = std::io::BufWriter::new(file);
        write_matrix_market(&mut w, &m)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transcription::{EnvironmentParams, Horizon};
    use crate::arm::ArmParams;

    fn task() -> ReachingTask {
        ReachingTask::new(
            ArmParams::default(),
            Horizon::new(0.0, 0.4, 6).unwrap(),
            EnvironmentParams::default(),
        )
        .unwrap()
    }

    fn point(task: &ReachingTask) -> (Vec<f64>, Vec<f64>) {
        let z = (0..task.dim()).map(|i| (0.37 * i as f64).sin()).collect();
        let nu = (0..task.num_constraints()).map(|i| (0.61 * i as f64).cos()).collect();
        (z, nu)
    }

    #[test]
    fn zero_multipliers_leave_objective_gradient() {
        let t = task();
        let (z, _) = point(&t);
        let theta = BehavioralParams([0.1, 0.3, 0.2, 0.15, 0.25]);
        let k = kkt_vector(&z, &vec![0.0; t.num_constraints()], &theta, &t).unwrap();
        let g = weighted_gradient(&z, &theta, &t.horizon, &t.arm).unwrap();
        assert_eq!(&k[..t.dim()], &g[..]);
        assert_eq!(&k[t.dim()..], &t.constraints(&z).unwrap()[..]);
    }

    #[test]
    fn primal_dual_jacobian_structure() {
        let t = task();
        let (z, nu) = point(&t);
        let jac = kkt_jacobian_primal_dual(&z, &nu, &BehavioralParams::default(), &t).unwrap();
        let full = jac.to_csr();
        assert_eq!(full.nrows(), t.dim() + t.num_constraints());
        assert!(full.asymmetry() <= 1e-12 * full.max_abs());
        for i in t.dim()..full.nrows() {
            assert!(full.row(i).all(|(j, _)| j < t.dim()));
        }
    }

    #[test]
    fn theta_jacobian_has_zero_bottom_and_ignores_multipliers() {
        let t = task();
        let (z, nu) = point(&t);
        let theta = BehavioralParams::default();
        let a = kkt_jacobian_theta(&z, &nu, &theta, &t).unwrap();
        let b = kkt_jacobian_theta(&z, &vec![0.0; nu.len()], &theta, &t).unwrap();
        assert_eq!(a, b);
        for c in &a.columns {
            assert!(c[t.dim()..].iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn matrix_market_dump() {
        let mut buf = Vec::new();
        let m = CsrMatrix::from_dense(&[vec![1.0, 0.0], vec![0.0, -2.5]], 2);
        write_matrix_market(&mut buf, &m).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("%%MatrixMarket"));
        assert!(s.contains("2 2 2"));
        assert!(s.contains("2 2 -2.5e0"));
    }
}
