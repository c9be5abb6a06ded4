//! Inverse optimal control: recovering basis weights from observed
//! trajectories, either by a derivative-free search around the forward
//! solver (bilevel) or by one NLP over weights, trajectories and multipliers
//! constrained by the forward problem's KKT conditions (single-level).

use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arm::ArmParams;
use crate::basis::{BehavioralParams, NUM_BASIS};
use crate::error::{check_len, Error, Result};
use crate::kkt::{inf_norm, kkt_jacobian_primal_dual, kkt_jacobian_theta, kkt_vector};
use crate::ocp::{solve_ocp, PrimalDual};
use crate::solver::{
    nelder_mead, solve_equality_nlp, NelderMeadOptions, NlpProblem, SolveReport, SolveStatus,
    SolverOptions,
};
use crate::sparse::{CsrMatrix, Triplets};
use crate::transcription::{EnvironmentParams, Horizon, ReachingTask, TrajectoryVariables};

/// Penalty returned to the outer search when an inner solve fails.
pub const FAILURE_PENALTY: f64 = 1e10;

/// Where a synthetic example came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub theta_true: BehavioralParams,
    pub noise_seed: Option<u64>,
    /// Per-joint noise standard deviation in degrees.
    pub sigma_deg: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IocExample {
    pub x: EnvironmentParams,
    pub y: TrajectoryVariables,
    pub provenance: Option<Provenance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IocDataset {
    pub examples: Vec<IocExample>,
    pub horizon: Horizon,
    pub arm: ArmParams,
}

impl IocDataset {
    pub fn new(examples: Vec<IocExample>, horizon: Horizon, arm: ArmParams) -> Result<Self> {
        let d = IocDataset {
            examples,
            horizon,
            arm,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.examples.is_empty() {
            return Err(Error::Config("dataset needs at least one example".into()));
        }
        self.horizon.validate()?;
        self.arm.validate()?;
        for ex in &self.examples {
            check_len("observed position knots", self.horizon.samples + 1, ex.y.q.len())?;
            check_len("observed velocity knots", self.horizon.samples, ex.y.dq.len())?;
            check_len("observed acceleration knots", self.horizon.samples - 1, ex.y.ddq.len())?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn task(&self, i: usize) -> Result<ReachingTask> {
        ReachingTask::new(self.arm, self.horizon, self.examples[i].x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IocMethod {
    Bilevel,
    SingleLevel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IocResult {
    pub theta_hat: BehavioralParams,
    pub predictions: Vec<PrimalDual>,
    pub loss: f64,
    pub report: SolveReport,
    pub method: IocMethod,
    /// Loss evaluations of the outer search (bilevel) or outer iterations.
    pub evaluations: usize,
    /// Set when the estimate has negative entries.
    pub negative_weights: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IocOptions {
    /// Forward solves.
    pub solver: SolverOptions,
    /// The single-level problem.
    pub outer_solver: SolverOptions,
    pub nelder_mead: NelderMeadOptions,
}

impl Default for IocOptions {
    fn default() -> Self {
        IocOptions {
            solver: SolverOptions::default(),
            outer_solver: SolverOptions {
                max_iterations: 500,
                damping_retries: 12,
                max_second_order_corrections: 4,
                ..SolverOptions::default()
            },
            nelder_mead: NelderMeadOptions {
                tol: 1e-6,
                max_evaluations: 2000,
                initial_step: 0.5,
            },
        }
    }
}

/// `θ / Σθ_j`.
pub fn theta_gauge(theta: &BehavioralParams) -> Result<BehavioralParams> {
    theta.normalized()
}

/// A point drawn on the simplex as normalized exponentials of uniform
/// variates.
pub fn random_theta<R: Rng>(rng: &mut R) -> BehavioralParams {
    let e: [f64; NUM_BASIS] = std::array::from_fn(|_| rng.random::<f64>().exp());
    let s: f64 = e.iter().sum();
    BehavioralParams(e.map(|v| v / s))
}

fn q_part<'a>(z: &'a [f64], horizon: &Horizon) -> &'a [f64] {
    &z[horizon.layout().q_range()]
}

fn observed_q(ex: &IocExample) -> Vec<f64> {
    ex.y.q.iter().flat_map(|k| k.iter().copied()).collect()
}

/// `ε = (1/2N) Σ_i ‖q̂⁽ⁱ⁾ − q⁽ⁱ⁾‖²` over joint positions only.
pub fn cumulative_loss(predictions: &[Vec<f64>], dataset: &IocDataset) -> Result<f64> {
    check_len("predictions", dataset.len(), predictions.len())?;
    let h = &dataset.horizon;
    let mut total = 0.0;
    for (z, ex) in predictions.iter().zip(&dataset.examples) {
        check_len("predicted trajectory", h.layout().dim(), z.len())?;
        total += q_part(z, h)
            .iter()
            .zip(observed_q(ex))
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>();
    }
    Ok(total / (2.0 * h.samples as f64))
}

/// Root-mean-square difference in degrees over every position knot and
/// both joints.
pub fn trajectory_rmse_deg(a: &TrajectoryVariables, b: &TrajectoryVariables) -> Result<f64> {
    check_len("position knots", a.q.len(), b.q.len())?;
    let sq: f64 = a
        .q
        .iter()
        .zip(&b.q)
        .map(|(x, y)| (x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2))
        .sum();
    Ok((sq / (2 * a.q.len()) as f64).sqrt().to_degrees())
}

#[derive(Debug, Clone)]
pub struct InnerLoopResult {
    pub predictions: Vec<PrimalDual>,
    pub loss: f64,
    pub reports: Vec<SolveReport>,
}

/// Solves every example's forward problem at `θ` (in parallel) and
/// evaluates the cumulative loss.
pub fn inner_loop(
    theta: &BehavioralParams,
    dataset: &IocDataset,
    warm_starts: Option<&[PrimalDual]>,
    opts: &SolverOptions,
) -> Result<InnerLoopResult> {
    if !theta.is_finite() {
        return Err(Error::Config("behavioral parameters must be finite".into()));
    }
    if let Some(w) = warm_starts {
        check_len("warm starts", dataset.len(), w.len())?;
    }
    let solved: Vec<Result<(PrimalDual, SolveReport)>> = (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let task = dataset.task(i)?;
            let sol = solve_ocp(&task, theta, warm_starts.map(|w| &w[i]), opts)?;
            if !sol.report.converged() {
                return Err(Error::InnerSolveFailure {
                    index: i,
                    report: sol.report,
                });
            }
            Ok((PrimalDual { z: sol.z, nu: sol.nu }, sol.report))
        })
        .collect();
    let mut predictions = Vec::with_capacity(dataset.len());
    let mut reports = Vec::with_capacity(dataset.len());
    for r in solved {
        let (p, rep) = r?;
        predictions.push(p);
        reports.push(rep);
    }
    let zs: Vec<Vec<f64>> = predictions.iter().map(|p| p.z.clone()).collect();
    let loss = cumulative_loss(&zs, dataset)?;
    Ok(InnerLoopResult {
        predictions,
        loss,
        reports,
    })
}

/// Maps four free coordinates onto the positive simplex (the first weight
/// is the reference with logit zero).
fn softmax(u: &[f64]) -> BehavioralParams {
    let mut logits = [0.0; NUM_BASIS];
    logits[1..].copy_from_slice(u);
    let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e = logits.map(|l| (l - top).exp());
    let s: f64 = e.iter().sum();
    BehavioralParams(e.map(|v| v / s))
}

fn inverse_softmax(theta: &BehavioralParams) -> Vec<f64> {
    let t = theta.0.map(|v| v.max(1e-12));
    t[1..].iter().map(|v| (v / t[0]).ln()).collect()
}

fn summarize(
    predictions: &[PrimalDual],
    theta: &BehavioralParams,
    dataset: &IocDataset,
) -> Result<(f64, f64)> {
    let mut stat = 0.0f64;
    let mut feas = 0.0f64;
    for (i, p) in predictions.iter().enumerate() {
        let task = dataset.task(i)?;
        let k = kkt_vector(&p.z, &p.nu, theta, &task)?;
        stat = stat.max(inf_norm(&k[..task.dim()]));
        feas = feas.max(inf_norm(&k[task.dim()..]));
    }
    Ok((stat, feas))
}

/// Nelder–Mead over a softmax parametrization of the weights, with one
/// forward solve per example and loss evaluation. Every inner solve is warm
/// started at the solution for `θ0`, so the loss is a pure function of the
/// weights.
pub fn bilevel_ioc(
    dataset: &IocDataset,
    theta0: &BehavioralParams,
    opts: &IocOptions,
) -> Result<IocResult> {
    let start = Instant::now();
    dataset.validate()?;
    let theta0 = theta_gauge(theta0)?;
    let base = inner_loop(&theta0, dataset, None, &opts.solver)?;
    let warm = base.predictions;
    let loss = |u: &[f64]| match inner_loop(&softmax(u), dataset, Some(&warm), &opts.solver) {
        Ok(r) => r.loss,
        Err(_) => FAILURE_PENALTY,
    };
    let nm = nelder_mead(loss, &inverse_softmax(&theta0), &opts.nelder_mead);
    let theta_hat = theta_gauge(&softmax(&nm.x))?;
    let fin = inner_loop(&theta_hat, dataset, Some(&warm), &opts.solver)?;
    let (stat, feas) = summarize(&fin.predictions, &theta_hat, dataset)?;
    Ok(IocResult {
        theta_hat,
        predictions: fin.predictions,
        loss: fin.loss,
        report: SolveReport {
            status: if nm.max_evaluations_reached {
                SolveStatus::MaxIterations
            } else {
                SolveStatus::Converged
            },
            iterations: nm.iterations,
            final_stationarity: stat,
            final_feasibility: feas,
            wall_time: start.elapsed().as_secs_f64(),
        },
        method: IocMethod::Bilevel,
        evaluations: nm.evaluations,
        negative_weights: has_negative_weights(&theta_hat),
    })
}

/// The single-level problem over `w = (θ, z⁽¹⁾, ν⁽¹⁾, …, z⁽ᴹ⁾, ν⁽ᴹ⁾)`:
/// minimize the cumulative loss subject to every example's KKT conditions
/// and `Σθ = 1`.
pub struct SingleLevelProblem<'a> {
    dataset: &'a IocDataset,
    tasks: Vec<ReachingTask>,
    observed: Vec<Vec<f64>>,
}

impl<'a> SingleLevelProblem<'a> {
    pub fn new(dataset: &'a IocDataset) -> Result<Self> {
        dataset.validate()?;
        let tasks = (0..dataset.len())
            .map(|i| dataset.task(i))
            .collect::<Result<_>>()?;
        let observed = dataset.examples.iter().map(observed_q).collect();
        Ok(SingleLevelProblem {
            dataset,
            tasks,
            observed,
        })
    }

    fn dz(&self) -> usize {
        self.dataset.horizon.layout().dim()
    }

    fn block(&self) -> usize {
        let lay = self.dataset.horizon.layout();
        lay.dim() + lay.num_constraints()
    }

    fn offset(&self, i: usize) -> usize {
        NUM_BASIS + i * self.block()
    }

    fn theta(w: &[f64]) -> BehavioralParams {
        BehavioralParams(std::array::from_fn(|j| w[j]))
    }

    fn split<'w>(&self, w: &'w [f64], i: usize) -> (&'w [f64], &'w [f64]) {
        let o = self.offset(i);
        (&w[o..o + self.dz()], &w[o + self.dz()..o + self.block()])
    }

    /// Packs weights and primal-dual pairs into one vector.
    pub fn pack(&self, theta: &BehavioralParams, pairs: &[PrimalDual]) -> Vec<f64> {
        let mut w = theta.0.to_vec();
        for p in pairs {
            w.extend_from_slice(&p.z);
            w.extend_from_slice(&p.nu);
        }
        w
    }

    pub fn unpack(&self, w: &[f64]) -> (BehavioralParams, Vec<PrimalDual>) {
        let pairs = (0..self.tasks.len())
            .map(|i| {
                let (z, nu) = self.split(w, i);
                PrimalDual {
                    z: z.to_vec(),
                    nu: nu.to_vec(),
                }
            })
            .collect();
        (Self::theta(w), pairs)
    }

    fn inv_n(&self) -> f64 {
        1.0 / self.dataset.horizon.samples as f64
    }
}

impl NlpProblem for SingleLevelProblem<'_> {
    fn num_variables(&self) -> usize {
        NUM_BASIS + self.tasks.len() * self.block()
    }

    fn num_constraints(&self) -> usize {
        self.tasks.len() * self.block() + 1
    }

    fn objective(&self, w: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        for (i, obs) in self.observed.iter().enumerate() {
            let (z, _) = self.split(w, i);
            total += z.iter().zip(obs).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        Ok(0.5 * self.inv_n() * total)
    }

    fn gradient(&self, w: &[f64]) -> Result<Vec<f64>> {
        let mut g = vec![0.0; w.len()];
        for (i, obs) in self.observed.iter().enumerate() {
            let o = self.offset(i);
            for (k, b) in obs.iter().enumerate() {
                g[o + k] = self.inv_n() * (w[o + k] - b);
            }
        }
        Ok(g)
    }

    fn objective_hessian(&self, w: &[f64]) -> Result<Triplets> {
        let n = w.len();
        let mut t = Triplets::new(n, n);
        for (i, obs) in self.observed.iter().enumerate() {
            let o = self.offset(i);
            for k in 0..obs.len() {
                t.push(o + k, o + k, self.inv_n());
            }
        }
        Ok(t)
    }

    fn constraints(&self, w: &[f64]) -> Result<Vec<f64>> {
        let theta = Self::theta(w);
        let mut c = Vec::with_capacity(self.num_constraints());
        for (i, task) in self.tasks.iter().enumerate() {
            let (z, nu) = self.split(w, i);
            c.extend(kkt_vector(z, nu, &theta, task)?);
        }
        c.push(theta.sum() - 1.0);
        Ok(c)
    }

    fn constraints_jacobian(&self, w: &[f64]) -> Result<CsrMatrix> {
        let theta = Self::theta(w);
        let mut t = Triplets::new(self.num_constraints(), w.len());
        for (i, task) in self.tasks.iter().enumerate() {
            let (z, nu) = self.split(w, i);
            let row0 = i * self.block();
            let col0 = self.offset(i);
            let pd = kkt_jacobian_primal_dual(z, nu, &theta, task)?;
            t.append_csr(&pd.hessian, row0, col0, false);
            t.append_csr(&pd.constraint_jacobian, row0 + self.dz(), col0, false);
            t.append_csr(&pd.constraint_jacobian, row0, col0 + self.dz(), true);
            let th = kkt_jacobian_theta(z, nu, &theta, task)?;
            for (j, col) in th.columns.iter().enumerate() {
                for (r, v) in col.iter().enumerate() {
                    if *v != 0.0 {
                        t.push(row0 + r, j, *v);
                    }
                }
            }
        }
        let last = self.num_constraints() - 1;
        for j in 0..NUM_BASIS {
            t.push(last, j, 1.0);
        }
        Ok(t.to_csr())
    }

    fn regularized_variables(&self) -> Option<Vec<bool>> {
        let mut mask = vec![false; self.num_variables()];
        mask[..NUM_BASIS].fill(true);
        Some(mask)
    }
}

/// Single-level IOC: warm start at the forward solutions for `θ0`, one
/// Newton-type solve of the joint problem, then a warm-started forward solve
/// per example at the normalized estimate so that every reported prediction
/// is a forward solution to the forward solver's tolerances.
pub fn single_level_ioc(
    dataset: &IocDataset,
    theta0: &BehavioralParams,
    opts: &IocOptions,
) -> Result<IocResult> {
    let start = Instant::now();
    let problem = SingleLevelProblem::new(dataset)?;
    let theta0 = theta_gauge(theta0)?;
    let warm = inner_loop(&theta0, dataset, None, &opts.solver).map_err(|e| e.in_phase("warm-start"))?;
    let w0 = problem.pack(&theta0, &warm.predictions);
    let lambda0 = vec![0.0; problem.num_constraints()];
    let sol = solve_equality_nlp(&problem, &w0, &lambda0, &opts.outer_solver)
        .map_err(|e| e.in_phase("single-level"))?;
    let (theta, raw) = problem.unpack(&sol.z);
    let theta_hat = theta_gauge(&theta).map_err(|e| e.in_phase("single-level"))?;
    let scale = 1.0 / theta.sum();
    let raw: Vec<PrimalDual> = raw
        .into_iter()
        .map(|p| PrimalDual {
            z: p.z,
            nu: p.nu.iter().map(|v| v * scale).collect(),
        })
        .collect();
    let predictions = match inner_loop(&theta_hat, dataset, Some(&raw), &opts.solver) {
        Ok(r) => r.predictions,
        Err(e) => {
            log::warn!("forward re-solve at the single-level estimate failed: {e}");
            raw
        }
    };
    let zs: Vec<Vec<f64>> = predictions.iter().map(|p| p.z.clone()).collect();
    let loss = cumulative_loss(&zs, dataset)?;
    let (stat, feas) = summarize(&predictions, &theta_hat, dataset)?;
    let mut report = sol.report;
    report.final_stationarity = stat;
    report.final_feasibility = feas;
    report.wall_time = start.elapsed().as_secs_f64();
    let evaluations = report.iterations;
    Ok(IocResult {
        negative_weights: has_negative_weights(&theta_hat),
        theta_hat,
        predictions,
        loss,
        report,
        method: IocMethod::SingleLevel,
        evaluations,
    })
}

fn has_negative_weights(theta: &BehavioralParams) -> bool {
    let neg = theta.has_negative();
    if neg {
        log::warn!("estimated weights have negative entries: {:?}", theta.0);
    }
    neg
}
