use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pointreg::harness::bench::run_method;
use pointreg::harness::{evaluate, load_pointset, run_benchmark, save_pointset, synth_pair, BenchGrid, DegradationSpec, GroundTruth, MissingRegion, TransformKind};
use pointreg::report::Method;
use pointreg::{Acceleration, RegError, RegistrationConfig, RegistrationReport, Result};

#[derive(Parser)]
#[command(name = "pointreg", version, about = "Probabilistic point set registration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Register model Y onto data X.
    Register {
        #[arg(long, default_value = "rigid")]
        method: Method,
        #[arg(long)]
        w: Option<f64>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        max_iters: Option<usize>,
        #[arg(long)]
        fast: Option<Acceleration>,
        /// Rank of the kernel approximation (non-rigid only).
        #[arg(long)]
        lowrank: Option<usize>,
        /// Keep the scale fixed at 1 (rigid only).
        #[arg(long)]
        fix_scale: bool,
        #[arg(long)]
        seed: Option<u64>,
        /// Full configuration as JSON; flags override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the aligned model points here.
        #[arg(long)]
        aligned: Option<PathBuf>,
        x: PathBuf,
        y: PathBuf,
    },
    /// Generate a synthetic pair with ground truth.
    Synth {
        #[arg(long, default_value = "rigid")]
        kind: TransformKind,
        #[arg(long, default_value_t = 0.0)]
        deform: f64,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        outliers: usize,
        /// Region removed from one set, `SET:AXIS:LO:HI` with bounds as
        /// fractions of the bounding box. Repeatable.
        #[arg(long)]
        missing: Vec<MissingRegion>,
        #[arg(long)]
        rotation: Option<f64>,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Base shape file; the built-in fish outline when omitted.
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long, default_value = "synth")]
        out_prefix: String,
    },
    /// Run a degradation sweep described by a JSON grid.
    Bench {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "rigid,icp")]
        methods: Vec<Method>,
        #[arg(long, default_value_t = 25)]
        trials: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute metrics of a saved report against saved ground truth.
    Eval {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &PathBuf) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Register { method, w, lambda, beta, tol, max_iters, fast, lowrank, fix_scale, seed, config, out, aligned, x, y } => {
            let mut cfg: RegistrationConfig = match &config {
                Some(p) => read_json(p)?,
                None => RegistrationConfig::default(),
            };
            cfg.w = w.unwrap_or(cfg.w);
            cfg.lambda = lambda.unwrap_or(cfg.lambda);
            cfg.beta = beta.unwrap_or(cfg.beta);
            cfg.tol = tol.unwrap_or(cfg.tol);
            cfg.max_iters = max_iters.unwrap_or(cfg.max_iters);
            cfg.acceleration = fast.unwrap_or(cfg.acceleration);
            cfg.lowrank = lowrank.or(cfg.lowrank);
            cfg.seed = seed.unwrap_or(cfg.seed);
            if fix_scale {
                cfg.estimate_scale = false;
            }
            let xs = load_pointset(&x)?;
            let ys = load_pointset(&y)?;
            let report = run_method(method, &xs, &ys, &cfg)?;
            log::info!("{} iterations, sigma2 {:.3e}, stop {:?}", report.iterations, report.sigma2, report.stop_reason);
            let json = report.to_json()?;
            match out {
                Some(p) => std::fs::write(p, json)?,
                None => println!("{json}"),
            }
            if let Some(p) = aligned {
                save_pointset(&report.aligned, p)?;
            }
        }
        Command::Synth { kind, deform, noise, outliers, missing, rotation, scale, seed, base, out_prefix } => {
            let spec = DegradationSpec { deform, noise, outliers, missing, rotation_deg: rotation, scale, seed, ..DegradationSpec::default() };
            let base = match base {
                Some(p) => load_pointset(p)?,
                None => pointreg::harness::shapes::fish(),
            };
            let pair = synth_pair(&spec, &base, kind)?;
            save_pointset(&pair.x, format!("{out_prefix}_x.txt"))?;
            save_pointset(&pair.y, format!("{out_prefix}_y.txt"))?;
            std::fs::write(format!("{out_prefix}_truth.json"), serde_json::to_string_pretty(&pair.truth)?)?;
        }
        Command::Bench { grid, methods, trials, out } => {
            let grid: BenchGrid = read_json(&grid)?;
            let report = run_benchmark(&grid, &methods, trials)?;
            report.write(&out)?;
            print!("{}", report.table());
        }
        Command::Eval { report, truth } => {
            let report = RegistrationReport::from_json(&std::fs::read_to_string(report)?)?;
            let truth: GroundTruth = read_json(&truth)?;
            let metrics = evaluate(&report, &truth)?;
            println!("{}", serde_json::to_string_pretty(&metrics)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, RegError::InvalidParameter(_) | RegError::Parse { .. }) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
