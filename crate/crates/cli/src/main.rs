use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use ioc_core::basis::BehavioralParams;
use ioc_core::experiments::{
    add_noise, export_artifacts, generate_ground_truth, noise_sweep, timing_benchmark, write_manifest,
    BenchCells, ExperimentConfig,
};
use ioc_core::gradcheck::run_derivative_checks;
use ioc_core::ioc::{
    bilevel_ioc, random_theta, single_level_ioc, trajectory_rmse_deg, IocDataset, IocResult,
};
use ioc_core::ocp::solve_ocp;
use ioc_core::transcription::TrajectoryVariables;

#[derive(Parser)]
#[command(name = "ioc", version, about = "Reaching optimal control and inverse optimal control experiments")]
struct Cli {
    /// TOML configuration file or run manifest.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the master seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one forward problem and write its trajectory.
    SolveOcp {
        /// Five comma-separated weights; defaults to the configured ground truth.
        #[arg(long, value_delimiter = ',')]
        theta: Option<Vec<f64>>,
    },
    /// Single-level inverse optimal control on one dataset.
    IocSingle(IocArgs),
    /// Bilevel inverse optimal control on one dataset.
    IocBilevel(IocArgs),
    /// Single-level IOC over the noise grid, with heatmaps and overlays.
    NoiseSweep,
    /// Wall-time comparison of the two estimators.
    Bench {
        #[arg(long, value_enum)]
        cells: Option<CellsArg>,
    },
    /// Finite-difference checks of every analytic derivative.
    CheckDerivatives {
        #[arg(long, default_value_t = 100)]
        points: usize,
    },
}

#[derive(Args)]
struct IocArgs {
    /// Dataset as JSON; synthesized from the configuration when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Per-joint noise standard deviation in degrees for a synthesized dataset.
    #[arg(long, value_delimiter = ',')]
    sigma: Option<Vec<f64>>,
    /// Initial weights; drawn from the seed when absent.
    #[arg(long, value_delimiter = ',')]
    theta0: Option<Vec<f64>>,
}

#[derive(Clone, Copy, ValueEnum)]
enum CellsArg {
    All,
    Diagonal,
}

fn theta_from(v: &[f64]) -> Result<BehavioralParams> {
    let arr: [f64; 5] = v.try_into().context("expected five weights")?;
    Ok(BehavioralParams(arr))
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct IocOutput<'a> {
    seed: u64,
    theta0: BehavioralParams,
    sigma_deg: Option<[f64; 2]>,
    noise_seed: Option<u64>,
    rmse_vs_observed_deg: Vec<f64>,
    rmse_vs_truth_deg: Option<Vec<f64>>,
    result: &'a IocResult,
}

fn run_ioc(cfg: &ExperimentConfig, args: &IocArgs, bilevel: bool) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let theta0 = match &args.theta0 {
        Some(t) => theta_from(t)?,
        None => random_theta(&mut rng),
    };
    let sigma = match &args.sigma {
        Some(s) => Some(<[f64; 2]>::try_from(s.as_slice()).context("expected two noise levels")?),
        None => None,
    };
    let (dataset, truth, noise_seed) = match &args.data {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let ds: IocDataset = serde_json::from_str(&text)?;
            ds.validate()?;
            (ds, None, None)
        }
        None => {
            let truth = generate_ground_truth(cfg)?;
            let (example, seed) = match sigma {
                Some(s) => {
                    let seed = rand::Rng::random(&mut rng);
                    (add_noise(&truth, s, seed), Some(seed))
                }
                None => (truth.clone(), None),
            };
            (IocDataset::new(vec![example], cfg.horizon, cfg.arm)?, Some(truth), seed)
        }
    };
    let result = if bilevel {
        bilevel_ioc(&dataset, &theta0, &cfg.ioc)?
    } else {
        single_level_ioc(&dataset, &theta0, &cfg.ioc)?
    };
    let recovered: Vec<TrajectoryVariables> = result
        .predictions
        .iter()
        .map(|p| TrajectoryVariables::unpack(&p.z, &dataset.horizon))
        .collect::<ioc_core::Result<_>>()?;
    let rmse_obs = recovered
        .iter()
        .zip(&dataset.examples)
        .map(|(y, ex)| trajectory_rmse_deg(y, &ex.y))
        .collect::<ioc_core::Result<_>>()?;
    let rmse_truth = match &truth {
        Some(t) => Some(vec![trajectory_rmse_deg(&recovered[0], &t.y)?]),
        None => None,
    };
    println!("{}: {}", if bilevel { "bilevel" } else { "single-level" }, result.report);
    println!("theta_hat = {:?}  loss = {:.6e}", result.theta_hat.0, result.loss);
    if result.negative_weights {
        println!("warning: the estimate has negative weights");
    }
    std::fs::create_dir_all(&cfg.output_dir)?;
    let name = if bilevel { "ioc_bilevel.json" } else { "ioc_single.json" };
    write_json(
        &cfg.output_dir.join(name),
        &IocOutput {
            seed: cfg.seed,
            theta0,
            sigma_deg: sigma,
            noise_seed,
            rmse_vs_observed_deg: rmse_obs,
            rmse_vs_truth_deg: rmse_truth,
            result: &result,
        },
    )?;
    for (i, y) in recovered.iter().enumerate() {
        y.save_csv(&dataset.horizon, &cfg.output_dir.join(format!("recovered_{i}.csv")))?;
    }
    write_manifest(cfg, if bilevel { "ioc-bilevel" } else { "ioc-single" }, &cfg.output_dir.join("manifest.toml"))?;
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let mut cfg = load_config(&cli)?;
    match &cli.command {
        Command::SolveOcp { theta } => {
            let theta = match theta {
                Some(t) => theta_from(t)?,
                None => cfg.theta_true,
            };
            let task = cfg.task()?;
            let sol = solve_ocp(&task, &theta, None, &cfg.ioc.solver)?;
            println!("{}", sol.report);
            std::fs::create_dir_all(&cfg.output_dir)?;
            let y = TrajectoryVariables::unpack(&sol.z, &task.horizon)?;
            let path = cfg.output_dir.join("trajectory.csv");
            y.save_csv(&task.horizon, &path)?;
            write_json(&cfg.output_dir.join("solve_report.json"), &sol.report)?;
            println!("wrote {}", path.display());
            if !sol.report.converged() {
                bail!("forward solve did not converge");
            }
        }
        Command::IocSingle(args) => run_ioc(&cfg, args, false)?,
        Command::IocBilevel(args) => run_ioc(&cfg, args, true)?,
        Command::NoiseSweep => {
            let sweep = noise_sweep(&cfg)?;
            let files = export_artifacts(&cfg, &sweep, None, "noise-sweep", &cfg.output_dir)?;
            let failed = sweep.cells.iter().filter(|c| c.theta_hat.is_none()).count();
            println!("{} cells, {failed} failed", sweep.cells.len());
            for f in files.files {
                println!("wrote {}", f.display());
            }
        }
        Command::Bench { cells } => {
            if let Some(c) = cells {
                cfg.bench_cells = match c {
                    CellsArg::All => BenchCells::All,
                    CellsArg::Diagonal => BenchCells::Diagonal,
                };
            }
            let report = timing_benchmark(&cfg)?;
            println!(
                "single-level mean {:.3} s ({} failed), bilevel mean {:.3} s ({} failed), speedup {:.1}",
                report.mean_single_level,
                report.single_level_failures,
                report.mean_bilevel,
                report.bilevel_failures,
                report.speedup
            );
            std::fs::create_dir_all(&cfg.output_dir)?;
            write_json(&cfg.output_dir.join("timing.json"), &report)?;
            write_manifest(&cfg, "bench", &cfg.output_dir.join("manifest.toml"))?;
        }
        Command::CheckDerivatives { points } => {
            let report = run_derivative_checks(*points, cfg.seed)?;
            print!("{report}");
            if !report.all_passed() {
                bail!("derivative checks failed");
            }
        }
    }
    Ok(())
}
