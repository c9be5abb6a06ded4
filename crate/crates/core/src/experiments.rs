//! Synthetic reaching experiments: ground truth, noise injection, the noise
//! sweep, the bilevel versus single-level timing comparison and the files
//! they emit.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arm::ArmParams;
use crate::basis::BehavioralParams;
use crate::error::{Error, Result};
use crate::ioc::{
    bilevel_ioc, inner_loop, random_theta, single_level_ioc, theta_gauge, trajectory_rmse_deg,
    IocDataset, IocExample, IocOptions, IocResult, Provenance,
};
use crate::ocp::{solve_ocp, PrimalDual};
use crate::transcription::{EnvironmentParams, Horizon, ReachingTask, TrajectoryVariables};

pub const SOFTWARE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Which sweep cells the timing comparison runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchCells {
    /// Every cell of the grid.
    All,
    /// Cells with equal noise level index on both joints.
    Diagonal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub arm: ArmParams,
    pub horizon: Horizon,
    pub environment: EnvironmentParams,
    pub theta_true: BehavioralParams,
    /// Levels per axis of the log-spaced noise grid.
    pub n_noise: usize,
    /// Smallest and largest noise standard deviation, degrees.
    pub noise_range_deg: [f64; 2],
    /// Explicit per-joint level lists in degrees; overrides the log grid.
    pub noise_grid: Option<[Vec<f64>; 2]>,
    pub seed: u64,
    /// Noise realizations per cell.
    pub repetitions: usize,
    pub bench_cells: BenchCells,
    pub ioc: IocOptions,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            arm: ArmParams::default(),
            horizon: Horizon::default(),
            environment: EnvironmentParams::default(),
            theta_true: BehavioralParams::default(),
            n_noise: 11,
            noise_range_deg: [0.1, 10.0],
            noise_grid: None,
            seed: 2024,
            repetitions: 1,
            bench_cells: BenchCells::All,
            ioc: IocOptions::default(),
            output_dir: PathBuf::from("results"),
        }
    }
}

/// Run manifest: the full configuration plus the software version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub software_version: String,
    pub command: String,
    pub config: ExperimentConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let value: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let cfg: ExperimentConfig = match value.get("config") {
            Some(inner) if value.contains_key("software_version") => inner
                .clone()
                .try_into()
                .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?,
            _ => toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a configuration file or a run manifest.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.arm.validate()?;
        self.horizon.validate()?;
        self.environment.validate(&self.arm)?;
        if !self.theta_true.is_finite() || (self.theta_true.sum() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "theta_true must be finite and sum to 1 (sum {})",
                self.theta_true.sum()
            )));
        }
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be at least 1".into()));
        }
        let levels = self.noise_levels();
        if levels.iter().any(|l| l.is_empty()) {
            return Err(Error::Config("noise grid needs at least one level per joint".into()));
        }
        if levels.iter().flatten().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::Config("noise levels must be positive and finite".into()));
        }
        Ok(())
    }

    /// Per-joint noise levels in degrees.
    pub fn noise_levels(&self) -> [Vec<f64>; 2] {
        if let Some(grid) = &self.noise_grid {
            return grid.clone();
        }
        let [lo, hi] = self.noise_range_deg;
        let n = self.n_noise;
        let level = |i: usize| {
            if n == 1 {
                lo
            } else {
                10f64.powf(lo.log10() + (hi.log10() - lo.log10()) * i as f64 / (n - 1) as f64)
            }
        };
        let axis: Vec<f64> = (0..n).map(level).collect();
        [axis.clone(), axis]
    }

    pub fn task(&self) -> Result<ReachingTask> {
        ReachingTask::new(self.arm, self.horizon, self.environment)
    }
}

/// One noise cell of the sweep. Failed cells carry NaN errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub index: usize,
    pub repetition: usize,
    pub sigma1: f64,
    pub sigma2: f64,
    pub theta_error: f64,
    /// Against the noise-free ground truth, degrees.
    pub trajectory_rmse: f64,
    /// Against the noisy observation, degrees.
    pub rmse_vs_observed: f64,
    pub loss: f64,
    pub wall_time: f64,
    pub status: String,
    pub iterations: usize,
    pub negative_weights: bool,
    pub noise_seed: u64,
    pub theta0: BehavioralParams,
    pub theta_hat: Option<BehavioralParams>,
}

/// Everything a sweep produced, with the per-cell recovered trajectory and
/// multipliers.
#[derive(Debug, Clone)]
pub struct SweepResult {
    pub ground_truth: IocExample,
    pub cells: Vec<SweepCell>,
    pub predictions: Vec<Option<PrimalDual>>,
}

/// Solves the forward problem at the configured weights.
pub fn generate_ground_truth(config: &ExperimentConfig) -> Result<IocExample> {
    config.validate()?;
    let task = config.task()?;
    let sol = solve_ocp(&task, &config.theta_true, None, &config.ioc.solver)?;
    if !sol.report.converged() || sol.report.final_feasibility > 1e-8 {
        return Err(Error::InnerSolveFailure {
            index: 0,
            report: sol.report,
        });
    }
    Ok(IocExample {
        x: task.env,
        y: TrajectoryVariables::unpack(&sol.z, &task.horizon)?,
        provenance: Some(Provenance {
            theta_true: config.theta_true,
            noise_seed: None,
            sigma_deg: None,
        }),
    })
}

/// Adds zero-mean Gaussian noise with per-joint standard deviation `sigma`
/// (degrees) to every position knot.
pub fn add_noise(example: &IocExample, sigma: [f64; 2], seed: u64) -> IocExample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = sigma.map(f64::to_radians);
    let mut out = example.clone();
    for knot in &mut out.y.q {
        for j in 0..2 {
            let e: f64 = rng.sample(StandardNormal);
            knot[j] += std[j] * e;
        }
    }
    let theta_true = example
        .provenance
        .as_ref()
        .map(|p| p.theta_true)
        .unwrap_or_default();
    out.provenance = Some(Provenance {
        theta_true,
        noise_seed: Some(seed),
        sigma_deg: Some(sigma),
    });
    out
}

/// A planned sweep run: grid position, noise levels and the seeds drawn for
/// it from the master seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellPlan {
    pub index: usize,
    pub repetition: usize,
    pub sigma: [f64; 2],
    pub noise_seed: u64,
    pub theta0: BehavioralParams,
}

/// Per-run seeds come from an independent stream of the master seed, so the
/// plan does not depend on execution order.
pub fn plan_cells(config: &ExperimentConfig) -> Vec<CellPlan> {
    let [s1, s2] = config.noise_levels();
    let mut plans = Vec::with_capacity(s1.len() * s2.len() * config.repetitions);
    for (i2, &b) in s2.iter().enumerate() {
        for (i1, &a) in s1.iter().enumerate() {
            let index = i2 * s1.len() + i1;
            for repetition in 0..config.repetitions {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                rng.set_stream((index * config.repetitions + repetition) as u64);
                let noise_seed = rng.random();
                let theta0 = random_theta(&mut rng);
                plans.push(CellPlan {
                    index,
                    repetition,
                    sigma: [a, b],
                    noise_seed,
                    theta0,
                });
            }
        }
    }
    plans
}

fn dataset_for(config: &ExperimentConfig, example: IocExample) -> Result<IocDataset> {
    IocDataset::new(vec![example], config.horizon, config.arm)
}

fn run_cell(config: &ExperimentConfig, truth: &IocExample, plan: &CellPlan) -> (SweepCell, Option<PrimalDual>) {
    let noisy = add_noise(truth, plan.sigma, plan.noise_seed);
    let observed = noisy.y.clone();
    let mut cell = SweepCell {
        index: plan.index,
        repetition: plan.repetition,
        sigma1: plan.sigma[0],
        sigma2: plan.sigma[1],
        theta_error: f64::NAN,
        trajectory_rmse: f64::NAN,
        rmse_vs_observed: f64::NAN,
        loss: f64::NAN,
        wall_time: f64::NAN,
        status: String::new(),
        iterations: 0,
        negative_weights: false,
        noise_seed: plan.noise_seed,
        theta0: plan.theta0,
        theta_hat: None,
    };
    let outcome = dataset_for(config, noisy)
        .and_then(|ds| single_level_ioc(&ds, &plan.theta0, &config.ioc))
        .and_then(|r| {
            let y = TrajectoryVariables::unpack(&r.predictions[0].z, &config.horizon)?;
            Ok((r, y))
        });
    match outcome {
        Ok((r, y)) => {
            cell.theta_error = r.theta_hat.distance(&config.theta_true);
            cell.trajectory_rmse = trajectory_rmse_deg(&y, &truth.y).unwrap_or(f64::NAN);
            cell.rmse_vs_observed = trajectory_rmse_deg(&y, &observed).unwrap_or(f64::NAN);
            cell.loss = r.loss;
            cell.wall_time = r.report.wall_time;
            cell.status = r.report.status.to_string();
            cell.iterations = r.report.iterations;
            cell.negative_weights = r.negative_weights;
            cell.theta_hat = Some(r.theta_hat);
            (cell, r.predictions.into_iter().next())
        }
        Err(e) => {
            log::warn!("sweep cell {} failed: {e}", plan.index);
            cell.status = format!("failed: {e}");
            (cell, None)
        }
    }
}

/// Runs single-level IOC on every noise cell. Failed cells are recorded and
/// the sweep continues.
pub fn noise_sweep(config: &ExperimentConfig) -> Result<SweepResult> {
    let truth = generate_ground_truth(config)?;
    let plans = plan_cells(config);
    let runs: Vec<(SweepCell, Option<PrimalDual>)> = plans
        .par_iter()
        .map(|p| run_cell(config, &truth, p))
        .collect();
    let (cells, predictions) = runs.into_iter().unzip();
    Ok(SweepResult {
        ground_truth: truth,
        cells,
        predictions,
    })
}

/// Index of the cell with the largest and with the median trajectory RMSE
/// among cells that produced an estimate.
pub fn overlay_cells(cells: &[SweepCell]) -> Option<(usize, usize)> {
    let mut ok: Vec<usize> = (0..cells.len())
        .filter(|&i| cells[i].trajectory_rmse.is_finite())
        .collect();
    if ok.is_empty() {
        return None;
    }
    ok.sort_by(|&a, &b| cells[a].trajectory_rmse.total_cmp(&cells[b].trajectory_rmse));
    Some((*ok.last().unwrap(), ok[(ok.len() - 1) / 2]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRun {
    pub index: usize,
    pub sigma1: f64,
    pub sigma2: f64,
    pub single_level_time: Option<f64>,
    pub single_level_iterations: Option<usize>,
    pub single_level_status: String,
    pub bilevel_time: Option<f64>,
    pub bilevel_evaluations: Option<usize>,
    pub bilevel_status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub runs: Vec<TimingRun>,
    pub mean_single_level: f64,
    pub mean_bilevel: f64,
    pub speedup: f64,
    pub single_level_failures: usize,
    pub bilevel_failures: usize,
}

fn timed(result: &Result<IocResult>) -> (Option<f64>, Option<usize>, String) {
    match result {
        Ok(r) => (
            Some(r.report.wall_time),
            Some(r.evaluations),
            r.report.status.to_string(),
        ),
        Err(e) => (None, None, format!("failed: {e}")),
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Runs both estimators on the same noisy data and initial weights for the
/// selected cells, one run at a time.
pub fn timing_benchmark(config: &ExperimentConfig) -> Result<TimingReport> {
    let truth = generate_ground_truth(config)?;
    let n1 = config.noise_levels()[0].len();
    let plans: Vec<CellPlan> = plan_cells(config)
        .into_iter()
        .filter(|p| p.repetition == 0)
        .filter(|p| config.bench_cells == BenchCells::All || p.index % n1 == p.index / n1)
        .collect();
    let mut runs = Vec::with_capacity(plans.len());
    for p in &plans {
        let ds = dataset_for(config, add_noise(&truth, p.sigma, p.noise_seed))?;
        let single = single_level_ioc(&ds, &p.theta0, &config.ioc);
        let bilevel = bilevel_ioc(&ds, &p.theta0, &config.ioc);
        let (st, si, ss) = timed(&single);
        let (bt, be, bs) = timed(&bilevel);
        log::info!("timing cell {}: single {ss} {st:?} s, bilevel {bs} {bt:?} s", p.index);
        runs.push(TimingRun {
            index: p.index,
            sigma1: p.sigma[0],
            sigma2: p.sigma[1],
            single_level_time: st,
            single_level_iterations: si,
            single_level_status: ss,
            bilevel_time: bt,
            bilevel_evaluations: be,
            bilevel_status: bs,
        });
    }
    let mean_single_level = mean(runs.iter().filter_map(|r| r.single_level_time));
    let mean_bilevel = mean(runs.iter().filter_map(|r| r.bilevel_time));
    Ok(TimingReport {
        single_level_failures: runs.iter().filter(|r| r.single_level_time.is_none()).count(),
        bilevel_failures: runs.iter().filter(|r| r.bilevel_time.is_none()).count(),
        speedup: mean_bilevel / mean_single_level,
        mean_single_level,
        mean_bilevel,
        runs,
    })
}

fn csv_err(e: csv::Error) -> Error {
    Error::Config(format!("csv: {e}"))
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(std::io::BufWriter::new(f))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct SweepRow {
    index: usize,
    repetition: usize,
    sigma1_deg: f64,
    sigma2_deg: f64,
    theta_error: f64,
    trajectory_rmse_deg: f64,
    rmse_vs_observed_deg: f64,
    loss: f64,
    status: String,
    iterations: usize,
    negative_weights: bool,
    noise_seed: u64,
    theta0_1: f64,
    theta0_2: f64,
    theta0_3: f64,
    theta0_4: f64,
    theta0_5: f64,
    theta_hat_1: f64,
    theta_hat_2: f64,
    theta_hat_3: f64,
    theta_hat_4: f64,
    theta_hat_5: f64,
}

/// The sweep table, one row per run. Wall times live in a separate file so
/// that this one is reproducible byte for byte.
pub fn write_sweep_csv<W: std::io::Write>(cells: &[SweepCell], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for c in cells {
        let t0 = c.theta0.0;
        let th = c.theta_hat.map(|t| t.0).unwrap_or([f64::NAN; 5]);
        w.serialize(SweepRow {
            index: c.index,
            repetition: c.repetition,
            sigma1_deg: c.sigma1,
            sigma2_deg: c.sigma2,
            theta_error: c.theta_error,
            trajectory_rmse_deg: c.trajectory_rmse,
            rmse_vs_observed_deg: c.rmse_vs_observed,
            loss: c.loss,
            status: c.status.clone(),
            iterations: c.iterations,
            negative_weights: c.negative_weights,
            noise_seed: c.noise_seed,
            theta0_1: t0[0],
            theta0_2: t0[1],
            theta0_3: t0[2],
            theta0_4: t0[3],
            theta0_5: t0[4],
            theta_hat_1: th[0],
            theta_hat_2: th[1],
            theta_hat_3: th[2],
            theta_hat_4: th[3],
            theta_hat_5: th[4],
        })
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Config(format!("csv: {e}")))
}

/// Joint positions of the four curves of one cell, degrees.
pub fn write_overlay_csv<W: std::io::Write>(
    horizon: &Horizon,
    curves: [&TrajectoryVariables; 4],
    out: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "t",
        "true_q1",
        "true_q2",
        "noisy_q1",
        "noisy_q2",
        "initial_q1",
        "initial_q2",
        "recovered_q1",
        "recovered_q2",
    ])
    .map_err(csv_err)?;
    for k in 0..=horizon.samples {
        let mut rec = vec![horizon.time(k).to_string()];
        for c in curves {
            let q = c
                .q
                .get(k)
                .ok_or_else(|| Error::dim("overlay position knots", horizon.samples + 1, c.q.len()))?;
            rec.push(q[0].to_degrees().to_string());
            rec.push(q[1].to_degrees().to_string());
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Config(format!("csv: {e}")))
}

const VIRIDIS: [[f64; 3]; 5] = [
    [68.0, 1.0, 84.0],
    [59.0, 82.0, 139.0],
    [33.0, 145.0, 140.0],
    [94.0, 201.0, 98.0],
    [253.0, 231.0, 37.0],
];

fn colormap(t: f64) -> String {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { return "#bbbbbb".into() };
    let x = t * (VIRIDIS.len() - 1) as f64;
    let i = (x.floor() as usize).min(VIRIDIS.len() - 2);
    let f = x - i as f64;
    let c: Vec<u8> = (0..3)
        .map(|k| (VIRIDIS[i][k] + f * (VIRIDIS[i + 1][k] - VIRIDIS[i][k])).round() as u8)
        .collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

fn decade_label(p: i32) -> String {
    format!("10<tspan dy=\"-6\" font-size=\"10\">{p}</tspan>")
}

/// A standalone SVG heatmap of `values[i2 * n1 + i1]` on log-scaled noise
/// axes.
pub fn heatmap_svg(title: &str, levels: &[Vec<f64>; 2], values: &[f64]) -> String {
    let (n1, n2) = (levels[0].len(), levels[1].len());
    let (x0, y0, w, h) = (80.0, 50.0, 400.0, 400.0);
    let (cw, ch) = (w / n1 as f64, h / n2 as f64);
    let finite = values.iter().copied().filter(|v| v.is_finite());
    let lo = finite.clone().fold(f64::INFINITY, f64::min);
    let hi = finite.fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"520\" font-family=\"sans-serif\" font-size=\"13\">"
    );
    let _ = writeln!(s, "<rect width=\"640\" height=\"520\" fill=\"white\"/>");
    let _ = writeln!(s, "<text x=\"{}\" y=\"30\" text-anchor=\"middle\">{title}</text>", x0 + w / 2.0);
    for i2 in 0..n2 {
        for i1 in 0..n1 {
            let v = values.get(i2 * n1 + i1).copied().unwrap_or(f64::NAN);
            let _ = writeln!(
                s,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{}\"><title>{v:.4}</title></rect>",
                x0 + i1 as f64 * cw,
                y0 + h - (i2 + 1) as f64 * ch,
                cw,
                ch,
                colormap((v - lo) / span)
            );
        }
    }
    let _ = writeln!(
        s,
        "<rect x=\"{x0}\" y=\"{y0}\" width=\"{w}\" height=\"{h}\" fill=\"none\" stroke=\"black\"/>"
    );
    let axis_pos = |lv: &[f64], v: f64, len: f64| {
        let (a, b) = (lv[0].log10(), lv[lv.len() - 1].log10());
        let cell = len / lv.len() as f64;
        if b > a {
            cell / 2.0 + (v.log10() - a) / (b - a) * (len - cell)
        } else {
            len / 2.0
        }
    };
    let decades = |lv: &[f64]| {
        let a = lv[0].log10().ceil() as i32;
        let b = lv[lv.len() - 1].log10().floor() as i32;
        a..=b
    };
    for p in decades(&levels[0]) {
        let x = x0 + axis_pos(&levels[0], 10f64.powi(p), w);
        let _ = writeln!(s, "<line x1=\"{x:.2}\" y1=\"{}\" x2=\"{x:.2}\" y2=\"{}\" stroke=\"black\"/>", y0 + h, y0 + h + 5.0);
        let _ = writeln!(s, "<text x=\"{x:.2}\" y=\"{}\" text-anchor=\"middle\">{}</text>", y0 + h + 22.0, decade_label(p));
    }
    for p in decades(&levels[1]) {
        let y = y0 + h - axis_pos(&levels[1], 10f64.powi(p), h);
        let _ = writeln!(s, "<line x1=\"{}\" y1=\"{y:.2}\" x2=\"{x0}\" y2=\"{y:.2}\" stroke=\"black\"/>", x0 - 5.0);
        let _ = writeln!(s, "<text x=\"{}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>", x0 - 8.0, y + 4.0, decade_label(p));
    }
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">σ₁ (deg)</text>", x0 + w / 2.0, y0 + h + 45.0);
    let _ = writeln!(
        s,
        "<text x=\"25\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 25 {})\">σ₂ (deg)</text>",
        y0 + h / 2.0,
        y0 + h / 2.0
    );
    let (bx, steps) = (x0 + w + 30.0, 50);
    for k in 0..steps {
        let t = k as f64 / (steps - 1) as f64;
        let _ = writeln!(
            s,
            "<rect x=\"{bx}\" y=\"{:.2}\" width=\"20\" height=\"{:.2}\" fill=\"{}\"/>",
            y0 + h - (k + 1) as f64 * h / steps as f64,
            h / steps as f64 + 0.5,
            colormap(t)
        );
    }
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\">{:.3}</text>", bx + 25.0, y0 + 10.0, hi);
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\">{:.3}</text>", bx + 25.0, y0 + h, lo);
    s.push_str("</svg>\n");
    s
}

/// Mean over repetitions of one field, per grid cell.
fn grid_values(cells: &[SweepCell], n: usize, field: impl Fn(&SweepCell) -> f64) -> Vec<f64> {
    (0..n)
        .map(|i| mean(cells.iter().filter(|c| c.index == i).map(&field)))
        .collect()
}

/// Files written by [`export_artifacts`].
#[derive(Debug, Clone, Default)]
pub struct ArtifactPaths {
    pub files: Vec<PathBuf>,
}

/// Writes the sweep table, wall times, heatmaps, the four-curve overlays for
/// the maximum and median RMSE cells, the timing report when present and the
/// run manifest.
pub fn export_artifacts(
    config: &ExperimentConfig,
    sweep: &SweepResult,
    timing: Option<&TimingReport>,
    command: &str,
    dir: &Path,
) -> Result<ArtifactPaths> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = ArtifactPaths::default();

    let path = dir.join("sweep.csv");
    write_sweep_csv(&sweep.cells, create(&path)?)?;
    out.files.push(path);

    let path = dir.join("sweep_wall_times.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    w.write_record(["index", "repetition", "wall_time_s"]).map_err(csv_err)?;
    for c in &sweep.cells {
        w.write_record([c.index.to_string(), c.repetition.to_string(), c.wall_time.to_string()])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    out.files.push(path);

    let levels = config.noise_levels();
    let n = levels[0].len() * levels[1].len();
    for (name, title, values) in [
        (
            "heatmap_theta_error.svg",
            "Weight error ‖θ̂ − θ‖₂",
            grid_values(&sweep.cells, n, |c| c.theta_error),
        ),
        (
            "heatmap_rmse.svg",
            "Trajectory RMSE (deg)",
            grid_values(&sweep.cells, n, |c| c.trajectory_rmse),
        ),
    ] {
        let path = dir.join(name);
        write_text(&path, &heatmap_svg(title, &levels, &values))?;
        out.files.push(path);
    }

    if let Some((max_i, med_i)) = overlay_cells(&sweep.cells) {
        for (name, i) in [("trajectories_max_rmse.csv", max_i), ("trajectories_median_rmse.csv", med_i)] {
            let cell = &sweep.cells[i];
            let noisy = add_noise(&sweep.ground_truth, [cell.sigma1, cell.sigma2], cell.noise_seed);
            let ds = dataset_for(config, noisy.clone())?;
            let initial = inner_loop(&theta_gauge(&cell.theta0)?, &ds, None, &config.ioc.solver)?;
            let initial = TrajectoryVariables::unpack(&initial.predictions[0].z, &config.horizon)?;
            let recovered = sweep.predictions[i]
                .as_ref()
                .ok_or_else(|| Error::Config(format!("cell {i} has no recovered trajectory")))?;
            let recovered = TrajectoryVariables::unpack(&recovered.z, &config.horizon)?;
            let path = dir.join(name);
            write_overlay_csv(
                &config.horizon,
                [&sweep.ground_truth.y, &noisy.y, &initial, &recovered],
                create(&path)?,
            )?;
            out.files.push(path);
        }
    }

    if let Some(t) = timing {
        let path = dir.join("timing.json");
        let text = serde_json::to_string_pretty(t).map_err(|e| Error::Config(e.to_string()))?;
        write_text(&path, &text)?;
        out.files.push(path);
    }

    let path = dir.join("manifest.toml");
    write_manifest(config, command, &path)?;
    out.files.push(path);
    Ok(out)
}

pub fn write_manifest(config: &ExperimentConfig, command: &str, path: &Path) -> Result<()> {
    let manifest = Manifest {
        software_version: SOFTWARE_VERSION.to_string(),
        command: command.to_string(),
        config: config.clone(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    write_text(path, &text)
}

/// Spearman rank correlation, average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_is_log_spaced_from_tenth_to_ten_degrees() {
        let [a, b] = ExperimentConfig::default().noise_levels();
        assert_eq!(a.len(), 11);
        assert_eq!(a, b);
        assert!((a[0] - 0.1).abs() < 1e-15);
        assert!((a[10] - 10.0).abs() < 1e-12);
        assert!((a[5] - 1.0).abs() < 1e-12);
        assert!((a[7] - 10f64.powf(0.4)).abs() < 1e-12);
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = ExperimentConfig {
            seed: 7,
            n_noise: 3,
            ..Default::default()
        };
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_toml_keeps_defaults() {
        let cfg = ExperimentConfig::from_toml_str("seed = 5\n[horizon]\nsamples = 40\n").unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.horizon.samples, 40);
        assert_eq!(cfg.horizon.tf, 1.2);
        assert_eq!(cfg.n_noise, 11);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(ExperimentConfig::from_toml_str("noise_range_deg = [0.0, 10.0]").is_err());
        assert!(ExperimentConfig::from_toml_str("theta_true = [1.0, 1.0, 0.0, 0.0, 0.0]").is_err());
        assert!(ExperimentConfig::from_toml_str("repetitions = 0").is_err());
    }

    #[test]
    fn plan_is_independent_of_grid_order_and_reproducible() {
        let cfg = ExperimentConfig::default();
        let a = plan_cells(&cfg);
        assert_eq!(a.len(), 121);
        assert_eq!(a, plan_cells(&cfg));
        let seeds: std::collections::HashSet<u64> = a.iter().map(|p| p.noise_seed).collect();
        assert_eq!(seeds.len(), 121);
        let small = ExperimentConfig {
            repetitions: 2,
            ..cfg
        };
        assert_eq!(plan_cells(&small).len(), 242);
    }

    #[test]
    fn spearman_of_monotone_data_is_one() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&x, &[10.0, 20.0, 25.0, 100.0]) - 1.0).abs() < 1e-15);
        assert!((spearman(&x, &[4.0, 3.0, 2.0, 1.0]) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn heatmap_labels_decades() {
        let levels = ExperimentConfig::default().noise_levels();
        let svg = heatmap_svg("t", &levels, &vec![1.0; 121]);
        for p in [-1, 0, 1] {
            assert!(svg.contains(&decade_label(p)));
        }
        assert_eq!(svg.matches("<rect").count(), 121 + 2 + 50);
        assert!(!svg.contains("href"));
    }

    #[test]
    fn overlay_selection_picks_max_and_median() {
        let mk = |i: usize, r: f64| SweepCell {
            index: i,
            repetition: 0,
            sigma1: 1.0,
            sigma2: 1.0,
            theta_error: 0.0,
            trajectory_rmse: r,
            rmse_vs_observed: 0.0,
            loss: 0.0,
            wall_time: 0.0,
            status: String::new(),
            iterations: 0,
            negative_weights: false,
            noise_seed: 0,
            theta0: BehavioralParams::default(),
            theta_hat: None,
        };
        let cells = vec![mk(0, 3.0), mk(1, f64::NAN), mk(2, 1.0), mk(3, 2.0), mk(4, 5.0)];
        assert_eq!(overlay_cells(&cells), Some((4, 3)));
    }
}
