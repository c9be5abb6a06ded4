//! Equality-constrained SQP (full-space Newton–KKT steps with inertia
//! correction and an ℓ₁ merit line search) and a Nelder–Mead simplex
//! method.

use std::fmt;
use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::ldl::{analyze, LdlFactor, LdlOptions, SymbolicLdl};
use crate::sparse::{CsrMatrix, Triplets};

/// A smooth equality-constrained problem `min f(z)  s.t.  c(z) = 0`.
pub trait NlpProblem {
    fn num_variables(&self) -> usize;
    fn num_constraints(&self) -> usize;
    fn objective(&self, z: &[f64]) -> Result<f64>;
    fn gradient(&self, z: &[f64]) -> Result<Vec<f64>>;
    /// Objective Hessian or a symmetric approximation of it.
    fn objective_hessian(&self, z: &[f64]) -> Result<Triplets>;
    fn constraints(&self, z: &[f64]) -> Result<Vec<f64>>;
    fn constraints_jacobian(&self, z: &[f64]) -> Result<CsrMatrix>;
    /// `Σ_j ν_j ∇²c_j`; problems may leave it out when they approximate
    /// the Lagrangian Hessian.
    fn constraints_weighted_hessian(&self, z: &[f64], _nu: &[f64]) -> Result<Triplets> {
        let n = self.num_variables();
        let _ = z;
        Ok(Triplets::new(n, n))
    }
    /// Variables that receive the inertia-correcting regularization; `None`
    /// regularizes every variable.
    fn regularized_variables(&self) -> Option<Vec<bool>> {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub tol_stationarity: f64,
    pub tol_feasibility: f64,
    pub max_iterations: usize,
    /// First primal regularization tried when the inertia is wrong.
    pub regularization_init: f64,
    pub regularization_growth: f64,
    pub regularization_max: f64,
    /// Dual regularization applied when the KKT matrix is singular.
    pub dual_regularization: f64,
    pub armijo: f64,
    pub backtrack: f64,
    pub min_step: f64,
    pub second_order_correction: bool,
    /// Corrections tried at the full step before backtracking.
    pub max_second_order_corrections: usize,
    pub refinement_steps: usize,
    /// Times a rejected full step is replaced by a more strongly damped one
    /// before backtracking.
    pub damping_retries: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol_stationarity: 1e-8,
            tol_feasibility: 1e-8,
            max_iterations: 200,
            regularization_init: 1e-6,
            regularization_growth: 10.0,
            regularization_max: 1e10,
            dual_regularization: 1e-10,
            armijo: 1e-4,
            backtrack: 0.5,
            min_step: 1e-12,
            second_order_correction: true,
            max_second_order_corrections: 1,
            refinement_steps: 3,
            damping_retries: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    LineSearchFailure,
    SingularSystem,
}

impl fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SolveStatus::Converged => "converged",
            SolveStatus::MaxIterations => "max_iterations",
            SolveStatus::LineSearchFailure => "line_search_failure",
            SolveStatus::SingularSystem => "singular_system",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub status: SolveStatus,
    pub iterations: usize,
    pub final_stationarity: f64,
    pub final_feasibility: f64,
    pub wall_time: f64,
}

impl SolveReport {
    pub fn converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }

    /// Maps a failed status onto the corresponding error.
    pub fn to_error(&self) -> Option<Error> {
        match self.status {
            SolveStatus::Converged => None,
            SolveStatus::MaxIterations => Some(Error::MaxIterations(self.iterations)),
            SolveStatus::LineSearchFailure => Some(Error::LineSearchFailure),
            SolveStatus::SingularSystem => Some(Error::SingularKktSystem),
        }
    }
}

impl fmt::Display for SolveReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} after {} iterations (stationarity {:.2e}, feasibility {:.2e}, {:.3} s)",
            self.status, self.iterations, self.final_stationarity, self.final_feasibility, self.wall_time
        )
    }
}

#[derive(Debug, Clone)]
pub struct NlpSolution {
    pub z: Vec<f64>,
    pub nu: Vec<f64>,
    pub report: SolveReport,
}

/// One row of the optional iteration trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub iter: usize,
    pub f: f64,
    pub feasibility: f64,
    pub stationarity: f64,
    pub step: f64,
    pub regularization: f64,
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn l1_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Iterate {
    z: Vec<f64>,
    f: f64,
    g: Vec<f64>,
    c: Vec<f64>,
    jac: CsrMatrix,
}

impl Iterate {
    fn eval(problem: &dyn NlpProblem, z: Vec<f64>) -> Result<Self> {
        Ok(Iterate {
            f: problem.objective(&z)?,
            g: problem.gradient(&z)?,
            c: problem.constraints(&z)?,
            jac: problem.constraints_jacobian(&z)?,
            z,
        })
    }

    fn stationarity(&self, nu: &[f64]) -> f64 {
        let jt = self.jac.tr_mul_vec(nu);
        self.g
            .iter()
            .zip(&jt)
            .fold(0.0, |m, (g, j)| m.max((g + j).abs()))
    }
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Newton–KKT system with the current regularization.
fn assemble_kkt(
    hess: &Triplets,
    jac: &CsrMatrix,
    mask: Option<&[bool]>,
    delta_w: f64,
    delta_c: f64,
) -> CsrMatrix {
    let n = jac.ncols();
    let m = jac.nrows();
    let mut t = Triplets::with_capacity(n + m, n + m, hess.entries().len() + 2 * jac.nnz() + n + m);
    t.append(hess, 0, 0, 1.0);
    t.append_csr(jac, n, 0, false);
    t.append_csr(jac, 0, n, true);
    for i in 0..n {
        if mask.is_none_or(|m| m[i]) {
            t.push(i, i, delta_w);
        }
    }
    for i in 0..m {
        t.push(n + i, n + i, -delta_c);
    }
    t.to_csr()
}

/// Solves `min f(z) s.t. c(z) = 0` from `(z0, ν0)`.
///
/// Multipliers follow the convention `∇f + (∂c)ᵀ ν = 0`.
pub fn solve_equality_nlp(
    problem: &dyn NlpProblem,
    z0: &[f64],
    nu0: &[f64],
    opts: &SolverOptions,
) -> Result<NlpSolution> {
    solve_equality_nlp_traced(problem, z0, nu0, opts, None)
}

pub fn solve_equality_nlp_traced(
    problem: &dyn NlpProblem,
    z0: &[f64],
    nu0: &[f64],
    opts: &SolverOptions,
    mut trace: Option<&mut Vec<TraceRow>>,
) -> Result<NlpSolution> {
    let start = Instant::now();
    let n = problem.num_variables();
    let m = problem.num_constraints();
    check_len("initial primal point", n, z0.len())?;
    check_len("initial multipliers", m, nu0.len())?;
    if !all_finite(z0) || !all_finite(nu0) {
        return Err(Error::Config("initial point is not finite".into()));
    }
    let ldl_opts = LdlOptions {
        refinement_steps: opts.refinement_steps,
        ..LdlOptions::default()
    };

    let mask = problem.regularized_variables();
    if let Some(m) = &mask {
        check_len("regularization mask", n, m.len())?;
    }
    let mut it = Iterate::eval(problem, z0.to_vec())?;
    let mut nu = nu0.to_vec();
    let mut mu = 0.0f64;
    let mut symbolic: Option<SymbolicLdl> = None;
    let mut last_delta = 0.0f64;
    let mut damping = 0.0f64;
    let mut iterations = 0;
    let mut last_step = 0.0;
    let mut last_reg = 0.0;

    let status = loop {
        let stat = it.stationarity(&nu);
        let feas = inf_norm(&it.c);
        if let Some(tr) = trace.as_deref_mut() {
            tr.push(TraceRow {
                iter: iterations,
                f: it.f,
                feasibility: feas,
                stationarity: stat,
                step: last_step,
                regularization: last_reg,
            });
        }
        if stat <= opts.tol_stationarity && feas <= opts.tol_feasibility {
            break SolveStatus::Converged;
        }
        if iterations >= opts.max_iterations {
            break SolveStatus::MaxIterations;
        }
        iterations += 1;

        let mut hess = problem.objective_hessian(&it.z)?;
        hess.append(&problem.constraints_weighted_hessian(&it.z, &nu)?, 0, 0, 1.0);

        let mut tries = 0;
        let outcome = loop {
            // Inertia correction: accept the first regularization giving
            // exactly n positive and m negative eigenvalues.
            let mut delta_w = damping;
            let mut delta_c = 0.0;
            let mut factored = None;
            loop {
                let kkt = assemble_kkt(&hess, &it.jac, mask.as_deref(), delta_w, delta_c);
                let sym = match &symbolic {
                    Some(s) if s.matches_pattern(&kkt) => s,
                    _ => {
                        symbolic = Some(analyze(&kkt, n));
                        symbolic.as_ref().unwrap()
                    }
                };
                let f = LdlFactor::factor(sym, &kkt, &ldl_opts);
                let inertia = f.inertia();
                if inertia.zero == 0 && inertia.positive == n && inertia.negative == m {
                    factored = Some((f, kkt));
                    break;
                }
                if inertia.zero > 0 && delta_c == 0.0 && m > 0 {
                    delta_c = opts.dual_regularization;
                }
                delta_w = if delta_w == 0.0 {
                    if last_delta == 0.0 {
                        opts.regularization_init
                    } else {
                        (last_delta / 3.0).max(opts.regularization_init)
                    }
                } else {
                    delta_w * opts.regularization_growth
                };
                if delta_w > opts.regularization_max {
                    break;
                }
            }
            let Some((factor, kkt)) = factored else {
                break Err(SolveStatus::SingularSystem);
            };
            if delta_w > damping {
                last_delta = delta_w;
            }

            let mut rhs: Vec<f64> = it.g.iter().map(|g| -g).collect();
            rhs.extend(it.c.iter().map(|c| -c));
            let sol = factor.solve_refined(&kkt, &rhs, opts.refinement_steps);
            if !all_finite(&sol) {
                break Err(SolveStatus::SingularSystem);
            }
            let (dz, nu_new) = sol.split_at(n);

            // ℓ₁ merit with a penalty large enough for descent.
            let c1 = l1_norm(&it.c);
            let gd = dot(&it.g, dz);
            let curv = {
                let mut hd = vec![0.0; n];
                for &(i, j, v) in hess.entries() {
                    hd[i] += v * dz[j];
                }
                let reg: f64 = dz
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| mask.as_ref().is_none_or(|m| m[*i]))
                    .map(|(_, d)| d * d)
                    .sum();
                dot(dz, &hd) + delta_w * reg
            };
            if c1 > 0.0 {
                let needed = (gd + 0.5 * curv.max(0.0)) / (0.9 * c1);
                mu = mu.max(needed).max(1.1 * inf_norm(nu_new));
            }
            let merit = |f: f64, c: &[f64]| f + mu * l1_norm(c);
            let phi0 = merit(it.f, &it.c);
            let deriv = gd - mu * c1;
            // Merit changes at the level of rounding error do not reject a step.
            let slack = 10.0 * f64::EPSILON * phi0.abs();

            // With damping retries left only the full step is tried.
            let full_only = tries < opts.damping_retries;
            let mut alpha = 1.0;
            let mut accepted: Option<Iterate> = None;
            let mut tried_soc = !opts.second_order_correction || m == 0;
            while alpha >= opts.min_step {
                let trial_z: Vec<f64> = it.z.iter().zip(dz).map(|(z, d)| z + alpha * d).collect();
                let f_trial = problem.objective(&trial_z)?;
                let c_trial = problem.constraints(&trial_z)?;
                let phi = merit(f_trial, &c_trial);
                if phi.is_finite() && phi <= phi0 + opts.armijo * alpha * deriv.min(0.0) + slack {
                    accepted = Some(Iterate::eval(problem, trial_z)?);
                    break;
                }
                if !tried_soc {
                    tried_soc = true;
                    let mut soc_z = trial_z;
                    let mut c_soc = c_trial;
                    let mut theta_prev = l1_norm(&c_soc);
                    for _ in 0..opts.max_second_order_corrections {
                        let mut soc_rhs = vec![0.0; n];
                        soc_rhs.extend(c_soc.iter().map(|c| -c));
                        let corr = factor.solve_refined(&kkt, &soc_rhs, opts.refinement_steps);
                        soc_z.iter_mut().zip(&corr[..n]).for_each(|(z, d)| *z += d);
                        if !all_finite(&soc_z) {
                            break;
                        }
                        let f_soc = problem.objective(&soc_z)?;
                        c_soc = problem.constraints(&soc_z)?;
                        let phi_soc = merit(f_soc, &c_soc);
                        if phi_soc.is_finite() && phi_soc <= phi0 + opts.armijo * deriv.min(0.0) + slack {
                            accepted = Some(Iterate::eval(problem, soc_z.clone())?);
                            break;
                        }
                        let theta_soc = l1_norm(&c_soc);
                        if theta_soc > 0.99 * theta_prev {
                            break;
                        }
                        theta_prev = theta_soc;
                    }
                    if accepted.is_some() {
                        break;
                    }
                }
                if full_only {
                    break;
                }
                alpha *= opts.backtrack;
            }
            match accepted {
                Some(next) => break Ok((next, alpha, nu_new.to_vec(), delta_w)),
                None if full_only => {
                    tries += 1;
                    damping = (delta_w * opts.regularization_growth).max(opts.regularization_init);
                }
                None => break Err(SolveStatus::LineSearchFailure),
            }
        };
        let (next, alpha, nu_new, delta_w) = match outcome {
            Ok(o) => o,
            Err(status) => break status,
        };
        if tries == 0 && damping > 0.0 {
            damping /= opts.regularization_growth;
            if damping < opts.regularization_init {
                damping = 0.0;
            }
        }
        last_reg = delta_w;
        for (v, new) in nu.iter_mut().zip(&nu_new) {
            *v += alpha * (new - *v);
        }
        last_step = alpha;
        it = next;
    };

    let report = SolveReport {
        status,
        iterations,
        final_stationarity: it.stationarity(&nu),
        final_feasibility: inf_norm(&it.c),
        wall_time: start.elapsed().as_secs_f64(),
    };
    log::debug!("solve_equality_nlp: {report}");
    Ok(NlpSolution {
        z: it.z,
        nu,
        report,
    })
}

/// Writes a trace as CSV with columns `iter,f,feasibility,stationarity,step,regularization`.
pub fn write_trace<W: Write>(rows: &[TraceRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)
            .map_err(|e| Error::Config(format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| Error::Config(format!("csv: {e}")))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NelderMeadOptions {
    /// Stop when every vertex lies within this distance of the best one.
    pub tol: f64,
    pub max_evaluations: usize,
    /// Edge length of the initial simplex.
    pub initial_step: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        NelderMeadOptions {
            tol: 1e-6,
            max_evaluations: 2000,
            initial_step: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
    pub iterations: usize,
    /// True when the evaluation budget ran out before convergence.
    pub max_evaluations_reached: bool,
}

/// Nelder–Mead with the standard coefficients (1, 2, ½, ½).
pub fn nelder_mead(
    mut loss: impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    opts: &NelderMeadOptions,
) -> NelderMeadResult {
    let d = x0.len();
    let mut evals = 0;
    let mut eval = |x: &[f64], evals: &mut usize| -> f64 {
        *evals += 1;
        let v = loss(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(d + 1);
    let v0 = eval(x0, &mut evals);
    simplex.push((x0.to_vec(), v0));
    for i in 0..d {
        let mut x = x0.to_vec();
        x[i] += opts.initial_step;
        let v = eval(&x, &mut evals);
        simplex.push((x, v));
    }

    let diameter = |s: &[(Vec<f64>, f64)]| -> f64 {
        s[1..]
            .iter()
            .map(|(x, _)| x.iter().zip(&s[0].0).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())))
            .fold(0.0, f64::max)
    };

    let mut iterations = 0;
    let mut exhausted = false;
    loop {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        if d == 0 || diameter(&simplex) < opts.tol {
            break;
        }
        if evals >= opts.max_evaluations {
            exhausted = true;
            break;
        }
        iterations += 1;
        let worst = simplex[d].clone();
        let mut centroid = vec![0.0; d];
        for (x, _) in &simplex[..d] {
            for (c, v) in centroid.iter_mut().zip(x) {
                *c += v / d as f64;
            }
        }
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&worst.0)
                .map(|(c, w)| c + t * (c - w))
                .collect()
        };
        let xr = along(1.0);
        let fr = eval(&xr, &mut evals);
        if fr < simplex[0].1 {
            let xe = along(2.0);
            let fe = eval(&xe, &mut evals);
            simplex[d] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < simplex[d - 1].1 {
            simplex[d] = (xr, fr);
            continue;
        }
        let (xc, fc) = if fr < worst.1 {
            let x = along(0.5);
            let f = eval(&x, &mut evals);
            (x, f)
        } else {
            let x = along(-0.5);
            let f = eval(&x, &mut evals);
            (x, f)
        };
        if fc < fr.min(worst.1) {
            simplex[d] = (xc, fc);
            continue;
        }
        let best = simplex[0].0.clone();
        for vertex in simplex.iter_mut().skip(1) {
            let x: Vec<f64> = best
                .iter()
                .zip(&vertex.0)
                .map(|(b, v)| b + 0.5 * (v - b))
                .collect();
            let f = eval(&x, &mut evals);
            *vertex = (x, f);
        }
    }
    let (x, value) = simplex.swap_remove(0);
    NelderMeadResult {
        x,
        value,
        evaluations: evals,
        iterations,
        max_evaluations_reached: exhausted,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `min ½ zᵀ Q z + pᵀ z  s.t.  A z = b`.
    struct Quadratic {
        q: Vec<Vec<f64>>,
        p: Vec<f64>,
        a: Vec<Vec<f64>>,
        b: Vec<f64>,
    }

    impl NlpProblem for Quadratic {
        fn num_variables(&self) -> usize {
            self.p.len()
        }
        fn num_constraints(&self) -> usize {
            self.b.len()
        }
        fn objective(&self, z: &[f64]) -> Result<f64> {
            let qz: Vec<f64> = self.q.iter().map(|r| dot(r, z)).collect();
            Ok(0.5 * dot(z, &qz) + dot(&self.p, z))
        }
        fn gradient(&self, z: &[f64]) -> Result<Vec<f64>> {
            Ok(self.q.iter().zip(&self.p).map(|(r, p)| dot(r, z) + p).collect())
        }
        fn objective_hessian(&self, _z: &[f64]) -> Result<Triplets> {
            let n = self.p.len();
            let mut t = Triplets::new(n, n);
            for (i, r) in self.q.iter().enumerate() {
                for (j, &v) in r.iter().enumerate() {
                    t.push(i, j, v);
                }
            }
            Ok(t)
        }
        fn constraints(&self, z: &[f64]) -> Result<Vec<f64>> {
            Ok(self.a.iter().zip(&self.b).map(|(r, b)| dot(r, z) - b).collect())
        }
        fn constraints_jacobian(&self, _z: &[f64]) -> Result<CsrMatrix> {
            Ok(CsrMatrix::from_dense(&self.a, self.p.len()))
        }
    }

    #[test]
    fn norm_with_one_linear_constraint() {
        let n = 4;
        let mut q = vec![vec![0.0; n]; n];
        for (i, row) in q.iter_mut().enumerate() {
            row[i] = 2.0;
        }
        let mut a = vec![vec![0.0; n]];
        a[0][0] = 1.0;
        let prob = Quadratic {
            q,
            p: vec![0.0; n],
            a,
            b: vec![1.0],
        };
        let sol = solve_equality_nlp(&prob, &[0.3, -1.0, 2.0, 0.5], &[0.0], &SolverOptions::default()).unwrap();
        assert!(sol.report.converged());
        assert_eq!(sol.report.iterations, 1);
        assert!((sol.z[0] - 1.0).abs() < 1e-12);
        assert!(sol.z[1..].iter().all(|v| v.abs() < 1e-12));
        assert!((sol.nu[0] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn unconstrained_quadratic_in_one_step() {
        let prob = Quadratic {
            q: vec![vec![4.0, 1.0], vec![1.0, 3.0]],
            p: vec![1.0, -2.0],
            a: vec![],
            b: vec![],
        };
        let sol = solve_equality_nlp(&prob, &[5.0, 5.0], &[], &SolverOptions::default()).unwrap();
        assert_eq!(sol.report.iterations, 1);
        // Q z = -p  →  z = (-(1·3 + 2·1), (4·2 + 1·1)) / 11
        assert!((sol.z[0] + 5.0 / 11.0).abs() < 1e-12);
        assert!((sol.z[1] - 9.0 / 11.0).abs() < 1e-12);
    }

    struct Circle;

    impl NlpProblem for Circle {
        fn num_variables(&self) -> usize {
            2
        }
        fn num_constraints(&self) -> usize {
            1
        }
        fn objective(&self, z: &[f64]) -> Result<f64> {
            Ok(z[0] + z[1])
        }
        fn gradient(&self, _z: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![1.0, 1.0])
        }
        fn objective_hessian(&self, _z: &[f64]) -> Result<Triplets> {
            Ok(Triplets::new(2, 2))
        }
        fn constraints(&self, z: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![z[0] * z[0] + z[1] * z[1] - 2.0])
        }
        fn constraints_jacobian(&self, z: &[f64]) -> Result<CsrMatrix> {
            Ok(CsrMatrix::from_dense(&[vec![2.0 * z[0], 2.0 * z[1]]], 2))
        }
        fn constraints_weighted_hessian(&self, _z: &[f64], nu: &[f64]) -> Result<Triplets> {
            let mut t = Triplets::new(2, 2);
            t.push(0, 0, 2.0 * nu[0]);
            t.push(1, 1, 2.0 * nu[0]);
            Ok(t)
        }
    }

    #[test]
    fn nonconvex_start_reaches_circle_minimum() {
        let mut trace = Vec::new();
        let sol = solve_equality_nlp_traced(&Circle, &[1.5, 0.2], &[0.0], &SolverOptions::default(), Some(&mut trace))
            .unwrap();
        assert!(sol.report.converged(), "{}", sol.report);
        assert!((sol.z[0] + 1.0).abs() < 1e-8 && (sol.z[1] + 1.0).abs() < 1e-8);
        assert!((sol.nu[0] - 0.5).abs() < 1e-8);
        assert_eq!(trace.len(), sol.report.iterations + 1);
        let mut buf = Vec::new();
        write_trace(&trace, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("iter,f,feasibility,stationarity,step"));
    }

    #[test]
    fn determinism() {
        let a = solve_equality_nlp(&Circle, &[0.3, 1.7], &[0.0], &SolverOptions::default()).unwrap();
        let b = solve_equality_nlp(&Circle, &[0.3, 1.7], &[0.0], &SolverOptions::default()).unwrap();
        assert_eq!(a.z, b.z);
        assert_eq!(a.nu, b.nu);
        assert_eq!(a.report.iterations, b.report.iterations);
    }

    #[test]
    fn dimension_errors() {
        assert!(matches!(
            solve_equality_nlp(&Circle, &[0.0], &[0.0], &SolverOptions::default()),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn nelder_mead_bowl() {
        let a = [1.0, -2.0, 0.5];
        let r = nelder_mead(
            |x| x.iter().zip(&a).map(|(x, a)| (x - a).powi(2)).sum(),
            &[4.0, 4.0, 4.0],
            &NelderMeadOptions::default(),
        );
        assert!(!r.max_evaluations_reached);
        for (x, a) in r.x.iter().zip(&a) {
            assert!((x - a).abs() < 1e-4);
        }
    }

    #[test]
    fn nelder_mead_rosenbrock() {
        let opts = NelderMeadOptions {
            tol: 1e-8,
            max_evaluations: 5000,
            ..Default::default()
        };
        let r = nelder_mead(
            |x| 100.0 * (x[1] - x[0] * x[0]).powi(2) + (1.0 - x[0]).powi(2),
            &[-1.2, 1.0],
            &opts,
        );
        assert!((r.x[0] - 1.0).abs() < 1e-3 && (r.x[1] - 1.0).abs() < 1e-3, "{:?}", r.x);
    }

    #[test]
    fn nelder_mead_constant_function() {
        let opts = NelderMeadOptions::default();
        let r = nelder_mead(|_| 3.0, &[0.0, 0.0], &opts);
        assert!(!r.max_evaluations_reached);
        assert_eq!(r.value, 3.0);
        assert!(r.evaluations < opts.max_evaluations);
    }
}
