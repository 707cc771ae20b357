//! `kinetic`: command line front end for simulation, estimation and
//! rate experiments on kinetic diffusions.
//!
//! Exit codes: 0 success (all verdicts pass), 1 a check or verdict failed,
//! 2 runtime error.

use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use kinetic_core::density::{estimate_density, variance_ladder, ProbeConfig};
use kinetic_core::drift::{
    default_rho_star, estimate_numerator, nw_drift, realized_a_jj, select_bandwidth, AdaptiveConstants, Stabilizer,
};
use kinetic_core::grid::EvalGrid;
use kinetic_core::harness::{
    emit_report, read_report, run_cells, ExperimentConfig, Progress, ReportFormat, RiskReport, RunOptions, WORKERS_ENV,
};
use kinetic_core::kernels::{BandwidthGrid, ProductKernel, UnivariateKernel};
use kinetic_core::model::{simulate_em, stationary_start, ModelSpec, StartRule};
use kinetic_core::rates::{summarize, RegimeKey, SmoothnessParams, Target};
use kinetic_core::trajectory::Trajectory;

#[derive(Parser)]
#[command(
    name = "kinetic",
    version,
    about = "Simulation and nonparametric estimation for kinetic diffusions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print rate exponents and bandwidths as JSON.
    Rates(RatesArgs),
    /// Kernel descriptor utilities.
    Kernel {
        #[command(subcommand)]
        command: KernelCommand,
    },
    /// Simulate one path with Euler-Maruyama.
    Simulate(SimulateArgs),
    /// Kernel density estimate on a grid.
    Density(DensityArgs),
    /// Variance of localised time averages over a scale ladder.
    Varprobe(VarprobeArgs),
    /// Drift estimate with a fixed or data-driven bandwidth.
    Drift(DriftArgs),
    /// Replicated rate experiments.
    Experiment {
        #[command(subcommand)]
        command: ExperimentCommand,
    },
}

#[derive(Args)]
struct RatesArgs {
    #[arg(long)]
    beta1: f64,
    #[arg(long)]
    beta2: f64,
    #[arg(long, default_value_t = 1)]
    d: usize,
    #[arg(long, default_value_t = 0.0)]
    eps: f64,
    #[arg(long = "T")]
    t: f64,
    #[arg(long, value_enum, default_value_t = TargetArg::Density)]
    target: TargetArg,
    #[arg(long, default_value_t = 1.0)]
    l1: f64,
    #[arg(long, default_value_t = 1.0)]
    l2: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetArg {
    Density,
    Drift,
}

#[derive(Subcommand)]
enum KernelCommand {
    /// Validate moments, Lipschitz constant and norms of a descriptor file.
    Check { file: PathBuf },
    /// Write the descriptor of the built-in kernel of a given order.
    Export {
        #[arg(long)]
        order: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct SimulateArgs {
    /// Catalog name (free, langevin, double-well) or a model JSON file.
    #[arg(long)]
    model: String,
    #[arg(long, default_value_t = 1)]
    d: usize,
    #[arg(long = "T")]
    t: f64,
    #[arg(long)]
    dt: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Binary trajectory file; a `.csv` extension writes CSV instead.
    #[arg(long)]
    out: PathBuf,
    /// Start state: `gibbs`, `burn` (from zero for the model's burn-in) or `zero`.
    #[arg(long, default_value = "auto")]
    start: String,
}

#[derive(Args)]
struct DensityArgs {
    #[arg(long)]
    traj: PathBuf,
    #[arg(long)]
    h1: f64,
    #[arg(long)]
    h2: f64,
    /// Kernel orders `l1,l2`, a single order, or a descriptor JSON file.
    #[arg(long, default_value = "1,1")]
    kernel: String,
    #[arg(long)]
    domain: String,
    #[arg(long)]
    mesh: f64,
    #[arg(long)]
    out: PathBuf,
    /// Set negative values to zero in the output.
    #[arg(long)]
    clip: bool,
}

#[derive(Args)]
struct VarprobeArgs {
    /// JSON with model, center, scales, T, dt, reps, seed and optional kernel_order.
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Mode {
    Fixed,
    Adaptive,
}

#[derive(Args)]
struct DriftArgs {
    #[arg(long)]
    traj: PathBuf,
    #[arg(long, default_value_t = 1)]
    j: usize,
    #[arg(long, value_enum, default_value_t = Mode::Fixed)]
    mode: Mode,
    #[arg(long)]
    h1: Option<f64>,
    #[arg(long)]
    h2: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    q: f64,
    #[arg(long, default_value_t = 2.0)]
    grid_base: f64,
    /// Threshold constant used for both `C̃₁` and `C̃₂`.
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value = "1,1")]
    kernel: String,
    #[arg(long)]
    domain: String,
    #[arg(long)]
    mesh: f64,
    /// `rT:b1,b2` or `rhostar:v`; defaults to half the smallest density estimate.
    #[arg(long)]
    stabilizer: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// Diagnostic JSON for adaptive mode; defaults to the output path with a `.json` extension.
    #[arg(long)]
    diagnostic: Option<PathBuf>,
}

#[derive(Subcommand)]
enum ExperimentCommand {
    /// Run (or resume) an experiment and write its report.
    Run {
        config: PathBuf,
        /// Worker threads; the environment variable takes precedence.
        #[arg(long, env = WORKERS_ENV)]
        workers: Option<usize>,
        /// Override the configured output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-emit a finished report.
    Report {
        dir: PathBuf,
        #[arg(long, value_enum, default_value_t = FormatArg::Svg)]
        format: FormatArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
    Svg,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => ReportFormat::Csv,
            FormatArg::Json => ReportFormat::Json,
            FormatArg::Svg => ReportFormat::Svg,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(command: Command) -> Result<bool> {
    match command {
        Command::Rates(a) => {
            let params = SmoothnessParams::new(a.beta1, a.beta2, a.l1, a.l2)?;
            let key = RegimeKey::new(a.beta1, a.beta2, a.d, a.eps)?;
            let target = match a.target {
                TargetArg::Density => Target::Density,
                TargetArg::Drift => Target::Drift,
            };
            print_json(&summarize(a.t, &params, &key, target)?)?;
            Ok(true)
        }
        Command::Kernel { command } => kernel(command),
        Command::Simulate(a) => simulate(a),
        Command::Density(a) => density(a),
        Command::Varprobe(a) => varprobe(a),
        Command::Drift(a) => drift(a),
        Command::Experiment { command } => experiment(command),
    }
}

fn kernel(command: KernelCommand) -> Result<bool> {
    match command {
        KernelCommand::Check { file } => {
            let k: UnivariateKernel =
                serde_json::from_reader(File::open(&file).with_context(|| file.display().to_string())?)
                    .context("parsing kernel descriptor")?;
            let check = k.check();
            print_json(&check)?;
            Ok(check.passed())
        }
        KernelCommand::Export { order, out } => {
            let k = UnivariateKernel::of_order(order)?;
            let text = serde_json::to_string_pretty(&k)?;
            match out {
                Some(p) => std::fs::write(p, text)?,
                None => println!("{text}"),
            }
            Ok(true)
        }
    }
}

fn load_model(name: &str, d: usize) -> Result<ModelSpec> {
    let path = Path::new(name);
    if path.extension().is_some_and(|e| e == "json") {
        let m: ModelSpec = serde_json::from_reader(File::open(path).with_context(|| name.to_string())?)?;
        m.validate()?;
        return Ok(m);
    }
    Ok(ModelSpec::catalog(name, d)?)
}

fn parse_kernel(spec: &str, d: usize) -> Result<ProductKernel> {
    if Path::new(spec).exists() {
        let k: UnivariateKernel = serde_json::from_reader(File::open(spec)?)?;
        if !k.check().passed() {
            bail!("kernel descriptor {spec} fails validation");
        }
        return Ok(ProductKernel::new(k.clone(), k, d)?);
    }
    let orders: Vec<usize> = spec
        .split(',')
        .map(|s| s.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("kernel must be `l1,l2`, an order or a descriptor file, got {spec}"))?;
    match orders[..] {
        [l] => Ok(ProductKernel::of_orders(l, l, d)?),
        [l1, l2] => Ok(ProductKernel::of_orders(l1, l2, d)?),
        _ => bail!("kernel must be `l1,l2`, an order or a descriptor file, got {spec}"),
    }
}

fn simulate(a: SimulateArgs) -> Result<bool> {
    let model = load_model(&a.model, a.d)?;
    let d = model.d;
    let rule = match a.start.as_str() {
        "auto" if model.gibbs_parameters().is_some() => Some(StartRule::Gibbs),
        "auto" | "zero" => None,
        "gibbs" => Some(StartRule::Gibbs),
        "burn" => Some(StartRule::Burn {
            anchor: vec![0.0; 2 * d],
        }),
        other => bail!("unknown start rule {other}"),
    };
    let (z0, burn) = match rule {
        Some(r) => {
            let burn = if matches!(r, StartRule::Burn { .. }) {
                model.default_burn_in()
            } else {
                0.0
            };
            (stationary_start(&model, burn, a.dt, a.seed, &r)?, burn)
        }
        None => (vec![0.0; 2 * d], 0.0),
    };
    let mut traj = simulate_em(&model, &z0, a.t, a.dt, a.seed)?;
    traj.burn_in = burn;
    if a.out.extension().is_some_and(|e| e == "csv") {
        traj.write_csv(File::create(&a.out)?)?;
    } else {
        traj.save(&a.out)?;
    }
    Ok(true)
}

fn density(a: DensityArgs) -> Result<bool> {
    let traj = Trajectory::load(&a.traj).with_context(|| a.traj.display().to_string())?;
    let kernel = parse_kernel(&a.kernel, traj.d)?;
    let grid = EvalGrid::parse_domain(&a.domain, traj.d, a.mesh)?;
    let mut est = estimate_density(&traj, &kernel, a.h1, a.h2, &grid)?;
    if a.clip {
        est = est.clipped();
    }
    est.write_csv(File::create(&a.out)?)?;
    Ok(true)
}

#[derive(serde::Deserialize)]
struct ProbeFile {
    model: String,
    #[serde(default = "one")]
    d: usize,
    center: Vec<f64>,
    scales: Vec<(f64, f64)>,
    #[serde(rename = "T")]
    t: f64,
    dt: f64,
    reps: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default = "one")]
    kernel_order: usize,
}

fn one() -> usize {
    1
}

fn varprobe(a: VarprobeArgs) -> Result<bool> {
    let cfg: ProbeFile =
        serde_json::from_reader(File::open(&a.config).with_context(|| a.config.display().to_string())?)?;
    let model = load_model(&cfg.model, cfg.d)?;
    let kernel = UnivariateKernel::of_order(cfg.kernel_order)?;
    let probe = ProbeConfig {
        t: cfg.t,
        dt: cfg.dt,
        reps: cfg.reps,
        seed: cfg.seed,
    };
    let out = variance_ladder(&model, &cfg.center, &cfg.scales, &probe, &kernel)?;
    match a.out {
        Some(p) => std::fs::write(p, serde_json::to_string_pretty(&out)?)?,
        None => print_json(&out)?,
    }
    Ok(true)
}

fn drift(a: DriftArgs) -> Result<bool> {
    let traj = Trajectory::load(&a.traj).with_context(|| a.traj.display().to_string())?;
    let d = traj.d;
    let t = traj.horizon();
    let kernel = parse_kernel(&a.kernel, d)?;
    let grid = EvalGrid::parse_domain(&a.domain, d, a.mesh)?;
    let (h1, h2, diagnostic) = match a.mode {
        Mode::Fixed => match (a.h1, a.h2) {
            (Some(h1), Some(h2)) => (h1, h2, None),
            _ => bail!("fixed mode needs --h1 and --h2"),
        },
        Mode::Adaptive => {
            let cands = BandwidthGrid::candidate(t, d, a.grid_base)?;
            let widest = cands.pairs().iter().fold(0.0f64, |m, &(x, y)| m.max(x).max(y));
            let pilot = estimate_density(&traj, &kernel, widest, widest, &grid)?;
            let a_jj = realized_a_jj(&traj, a.j, 10)?;
            let constants = AdaptiveConstants::from_pilot(&pilot, a_jj, &kernel, a.lambda, a.lambda);
            let sel = select_bandwidth(&traj, a.j, &kernel, &cands, &grid, a.q, &constants)?;
            (sel.chosen.0, sel.chosen.1, Some(sel))
        }
    };
    let num = estimate_numerator(&traj, a.j, &kernel, h1, h2, &grid)?;
    let rho = estimate_density(&traj, &kernel, h1, h2, &grid)?;
    let stab = match &a.stabilizer {
        Some(s) => Stabilizer::parse(s, t, d)?,
        None => Stabilizer::RhoStar(default_rho_star(&rho)),
    };
    let b = nw_drift(&num, &rho, stab)?;
    let mut w = std::io::BufWriter::new(File::create(&a.out)?);
    use std::io::Write;
    let mut head: Vec<String> = (1..=d).map(|i| format!("x{i}")).collect();
    head.extend((1..=d).map(|i| format!("y{i}")));
    head.push("value".into());
    writeln!(w, "{}", head.join(","))?;
    for (p, v) in grid.points().zip(&b) {
        let fields: Vec<String> = p.iter().chain(std::iter::once(v)).map(|x| x.to_string()).collect();
        writeln!(w, "{}", fields.join(","))?;
    }
    w.flush()?;
    if let Some(sel) = diagnostic {
        let path = a.diagnostic.unwrap_or_else(|| a.out.with_extension("json"));
        std::fs::write(path, serde_json::to_string_pretty(&sel)?)?;
    }
    Ok(true)
}

fn summarize_report(report: &RiskReport) {
    if let (Some(e), Some(f)) = (report.exponent, report.fit) {
        eprintln!(
            "{}: fitted slope {:.3} ± {:.3} (log T: {:.3}), theoretical exponent {:.3}",
            report.name, f.slope, f.stderr, f.slope_log_t, e
        );
    }
    if let Some(l) = report.lambda {
        eprintln!("{}: threshold constant {l:.4}", report.name);
    }
    for v in &report.verdicts {
        eprintln!("[{}] {}: {}", if v.passed { "PASS" } else { "FAIL" }, v.name, v.detail);
    }
}

fn experiment(command: ExperimentCommand) -> Result<bool> {
    match command {
        ExperimentCommand::Run { config, workers, out } => {
            let mut cfg = ExperimentConfig::load(&config).with_context(|| config.display().to_string())?;
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            let opts = RunOptions {
                workers,
                ..Default::default()
            };
            match run_cells(&cfg, &opts)? {
                Progress::Complete(report) => {
                    emit_report(&report, ReportFormat::Svg, &cfg.output_dir)?;
                    summarize_report(&report);
                    Ok(report.passed())
                }
                Progress::Interrupted { done, total } => bail!("stopped after {done} of {total} cells"),
            }
        }
        ExperimentCommand::Report { dir, format } => {
            let report = read_report(&dir)?;
            let path = emit_report(&report, format.into(), &dir)?;
            println!("{}", path.display());
            summarize_report(&report);
            Ok(report.passed())
        }
    }
}
