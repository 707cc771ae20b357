//! Experiment orchestration: configuration, seeded replication cells,
//! checkpointed execution, aggregation and report emission.
//!
//! A run is a list of cells `(T, replication)`. Each cell draws its own path
//! from `cell_seed(seed_root, T, rep)`, so cells are independent of ladder
//! order and of each other. Completed cells are checkpointed atomically;
//! re-running the same configuration resumes where it stopped.

mod cells;
mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::EvalGrid;
use crate::kernels::ProductKernel;
use crate::model::ModelSpec;
use crate::rates::{RegimeKey, SmoothnessParams};

pub use cells::{cell_bandwidths, cell_step, CALIBRATION_SALT};
pub use report::{
    aggregate, emit_report, fit_slope, read_cells_csv, read_report, svg_guide_slope, Aggregate, ReportFormat,
    RiskReport, SlopeFit, Verdict,
};

/// Environment variable overriding the worker count.
pub const WORKERS_ENV: &str = "KINETIC_WORKERS";

/// A catalog model with optional parameter overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRef {
    pub name: String,
    #[serde(default = "one")]
    pub d: usize,
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub sigma: Option<f64>,
    #[serde(default)]
    pub depth: Option<f64>,
}

fn one() -> usize {
    1
}

impl ModelRef {
    pub fn resolve(&self) -> Result<ModelSpec> {
        let sigma = self.sigma.unwrap_or(1.0);
        let gamma = self.gamma.unwrap_or(1.0);
        match self.name.as_str() {
            "free" => ModelSpec::free(self.d, sigma),
            "langevin" => ModelSpec::langevin(self.d, gamma, sigma),
            "double-well" => ModelSpec::double_well(self.d, gamma, sigma, self.depth.unwrap_or(1.0)),
            other => ModelSpec::catalog(other, self.d),
        }
    }
}

/// `dt = min(max, factor · h_min²)`, shrunk so that `T/dt` is an integer;
/// `fixed` overrides the rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DtRule {
    #[serde(default = "half")]
    pub factor: f64,
    #[serde(default = "tenth")]
    pub max: f64,
    #[serde(default)]
    pub fixed: Option<f64>,
}

fn half() -> f64 {
    0.5
}

fn tenth() -> f64 {
    0.1
}

impl Default for DtRule {
    fn default() -> Self {
        Self {
            factor: 0.5,
            max: 0.1,
            fixed: None,
        }
    }
}

/// Denominator rule for fixed-bandwidth drift experiments.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "kebab-case")]
pub enum StabilizerRule {
    /// `ρ⋆` = half the smallest density estimate on the grid, floored at `1e-4`.
    #[default]
    RhoStarPilot,
    RhoStar(f64),
    /// `r_T` from the smoothness surrogate.
    #[serde(rename = "rt")]
    RT,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EstimatorSpec {
    Density,
    DriftFixed {
        #[serde(default = "one")]
        j: usize,
        #[serde(default)]
        stabilizer: StabilizerRule,
    },
    DriftAdaptive {
        #[serde(default = "one")]
        j: usize,
        #[serde(default = "unit")]
        q: f64,
        #[serde(default = "two")]
        grid_base: f64,
        /// Runs used to calibrate `C̃₁ = C̃₂`; ignored when `lambda` is set.
        #[serde(default = "forty")]
        calibration_runs: usize,
        #[serde(default)]
        lambda: Option<f64>,
        /// Bandwidth of the density estimate used for the plug-in `‖ρ‖∞`.
        #[serde(default)]
        density_bandwidth: Option<f64>,
        #[serde(default = "bin")]
        bin_width: f64,
        #[serde(default = "three")]
        oracle_factor: f64,
        #[serde(default = "fraction")]
        oracle_fraction: f64,
    },
    Varprobe {
        center: Vec<f64>,
        scales: Vec<(f64, f64)>,
        #[serde(default)]
        min_slope: Option<f64>,
    },
}

fn unit() -> f64 {
    1.0
}
fn two() -> f64 {
    2.0
}
fn three() -> f64 {
    3.0
}
fn forty() -> usize {
    40
}
fn bin() -> f64 {
    1.0 / 512.0
}
fn fraction() -> f64 {
    0.8
}

impl EstimatorSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Density => "density",
            Self::DriftFixed { .. } => "drift-fixed",
            Self::DriftAdaptive { .. } => "drift-adaptive",
            Self::Varprobe { .. } => "varprobe",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub model: ModelRef,
    #[serde(default = "first_order")]
    pub kernel_orders: (usize, usize),
    /// Box `D`, e.g. `x:[-1,1],y:[0.5,1.5]`.
    pub domain: String,
    /// Evaluation spacing; defaults to half the smallest bandwidth of the run.
    #[serde(default)]
    pub mesh: Option<f64>,
    #[serde(rename = "T_ladder")]
    pub t_ladder: Vec<f64>,
    #[serde(default)]
    pub dt_rule: DtRule,
    pub replications: usize,
    #[serde(default)]
    pub seed_root: u64,
    pub estimator: EstimatorSpec,
    /// Smoothness surrogate `(β₁, β₂)` for the bandwidth rules.
    #[serde(default = "beta_two")]
    pub smoothness: (f64, f64),
    /// Regime `ε`; defaults to `inf_D ‖y‖`.
    #[serde(default)]
    pub eps: Option<f64>,
    #[serde(default = "slope_tol")]
    pub slope_tolerance: f64,
    #[serde(default = "out_dir")]
    pub output_dir: PathBuf,
    /// Wall-clock cap per cell.
    #[serde(default)]
    pub budget_secs: Option<f64>,
    #[serde(default)]
    pub workers: Option<usize>,
}

fn first_order() -> (usize, usize) {
    (1, 1)
}
fn beta_two() -> (f64, f64) {
    (2.0, 2.0)
}
fn slope_tol() -> f64 {
    0.15
}
fn out_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Everything a cell needs, resolved once per run.
pub(crate) struct Resolved {
    pub model: ModelSpec,
    pub kernel: ProductKernel,
    pub params: SmoothnessParams,
    pub key: RegimeKey,
    pub grid: EvalGrid,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.resolve().map(|_| ())
    }

    pub(crate) fn resolve(&self) -> Result<Resolved> {
        if self.t_ladder.is_empty() {
            return Err(invalid("T_ladder", "ladder is empty"));
        }
        if self.t_ladder.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(invalid("T_ladder", "ladder must be strictly increasing"));
        }
        if self.t_ladder.len() >= 3 {
            let r = self.t_ladder[1] / self.t_ladder[0];
            if self.t_ladder.windows(2).any(|w| ((w[1] / w[0]) / r - 1.0).abs() > 1e-9) {
                return Err(invalid("T_ladder", "ladder must be geometric"));
            }
        }
        if self.replications == 0 {
            return Err(invalid("replications", "need at least one replication"));
        }
        let model = self.model.resolve()?;
        let d = model.d;
        let kernel = ProductKernel::of_orders(self.kernel_orders.0, self.kernel_orders.1, d)?;
        let params = SmoothnessParams::isotropic_constants(self.smoothness.0, self.smoothness.1)?;
        let probe = EvalGrid::parse_domain(&self.domain, d, 1.0)?;
        let eps = self.eps.unwrap_or(probe.eps_d);
        let key = RegimeKey::new(self.smoothness.0, self.smoothness.1, d, eps)?;
        let mut h_min = f64::INFINITY;
        for &t in &self.t_ladder {
            let (h1, h2) = cells::cell_bandwidths(self, &model, &params, &key, t)?;
            h_min = h_min.min(h1).min(h2);
        }
        let mesh = self.mesh.unwrap_or(0.5 * h_min);
        let grid = EvalGrid::parse_domain(&self.domain, d, mesh)?;
        if !matches!(self.estimator, EstimatorSpec::Varprobe { .. }) {
            grid.check_mesh(h_min, 0.5)?;
        }
        if let EstimatorSpec::Varprobe { center, scales, .. } = &self.estimator {
            if center.len() != 2 * d || scales.is_empty() {
                return Err(invalid(
                    "estimator",
                    "varprobe needs a 2d-point centre and at least one scale",
                ));
            }
            if self.replications < 2 {
                return Err(invalid(
                    "replications",
                    "variance probes need at least two replications",
                ));
            }
        }
        Ok(Resolved {
            model,
            kernel,
            params,
            key,
            grid,
        })
    }

    /// Digest of everything that influences cell values.
    pub fn digest(&self) -> u64 {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.workers = None;
        c.budget_secs = None;
        let text = serde_json::to_string(&c).unwrap_or_default();
        text.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
        })
    }
}

/// Recomputes aggregates, fits and verdicts from raw cells (e.g. read back
/// with [`read_cells_csv`]).
pub fn rebuild_report(
    config: &ExperimentConfig,
    cells: Vec<CellResult>,
    lambda: Option<f64>,
    calibration: &[f64],
) -> Result<RiskReport> {
    report::build_report(config, &config.resolve()?, cells, lambda, calibration)
}

/// One replication's outcome. Varprobe cells carry one row per scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    #[serde(rename = "T")]
    pub t: f64,
    pub rep: usize,
    pub h1: f64,
    pub h2: f64,
    pub value: f64,
    #[serde(default)]
    pub extra: std::collections::BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct Checkpoint {
    digest: u64,
    calibration: Vec<f64>,
    cells: Vec<(usize, usize, Vec<CellResult>)>,
}

fn checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("checkpoint.json")
}

/// Write-then-rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn load_checkpoint(dir: &Path, digest: u64) -> Result<Checkpoint> {
    let path = checkpoint_path(dir);
    if !path.exists() {
        return Ok(Checkpoint {
            digest,
            ..Default::default()
        });
    }
    let cp: Checkpoint = serde_json::from_slice(&fs::read(&path)?)?;
    if cp.digest != digest {
        return Err(Error::Format(format!(
            "checkpoint {} belongs to a different configuration",
            path.display()
        )));
    }
    Ok(cp)
}

fn save_checkpoint(dir: &Path, cp: &Checkpoint) -> Result<()> {
    write_atomic(&checkpoint_path(dir), &serde_json::to_vec(cp)?)
}

/// Execution knobs that do not change results.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub workers: Option<usize>,
    /// Stop after this many newly computed cells (simulated interruption).
    pub stop_after: Option<usize>,
    /// Cells per checkpoint write; default `4 · workers`, at least 8.
    pub chunk: Option<usize>,
}

/// Worker count: environment override, then config, then all cores.
pub fn worker_count(config: &ExperimentConfig, opts: &RunOptions) -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .or(opts.workers)
        .or(config.workers)
        .unwrap_or_else(rayon::current_num_threads)
        .max(1)
}

/// Outcome of [`run_cells`].
#[derive(Debug)]
pub enum Progress {
    Complete(RiskReport),
    Interrupted { done: usize, total: usize },
}

/// Runs every pending cell and builds the report; see [`run_cells`].
pub fn run_experiment(config: &ExperimentConfig) -> Result<RiskReport> {
    match run_cells(config, &RunOptions::default())? {
        Progress::Complete(r) => Ok(r),
        Progress::Interrupted { .. } => unreachable!("no stop requested"),
    }
}

pub fn run_cells(config: &ExperimentConfig, opts: &RunOptions) -> Result<Progress> {
    let resolved = config.resolve()?;
    fs::create_dir_all(&config.output_dir)?;
    let digest = config.digest();
    let mut cp = load_checkpoint(&config.output_dir, digest)?;
    let workers = worker_count(config, opts);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| invalid("workers", e.to_string()))?;
    let chunk = opts.chunk.unwrap_or((4 * workers).max(8));
    let mut budget_left = opts.stop_after.unwrap_or(usize::MAX);

    let timed = |t: f64, rep: usize, f: &dyn Fn() -> Result<Vec<CellResult>>| -> Result<Vec<CellResult>> {
        let start = Instant::now();
        let out = f()?;
        if let Some(cap) = config.budget_secs {
            if start.elapsed().as_secs_f64() > cap {
                return Err(Error::Budget {
                    horizon: t,
                    replication: rep,
                    budget_secs: cap,
                });
            }
        }
        Ok(out)
    };

    // calibration runs for the adaptive threshold
    let mut lambda = None;
    if let EstimatorSpec::DriftAdaptive {
        calibration_runs,
        lambda: fixed,
        ..
    } = &config.estimator
    {
        match fixed {
            Some(l) => lambda = Some(*l),
            None => {
                let t = config.t_ladder[0];
                while cp.calibration.len() < *calibration_runs {
                    if budget_left == 0 {
                        return Ok(Progress::Interrupted {
                            done: cp.cells.len(),
                            total: config.t_ladder.len() * config.replications,
                        });
                    }
                    let start = cp.calibration.len();
                    let end = (start + chunk).min(*calibration_runs).min(start + budget_left);
                    let values: Vec<f64> = pool.install(|| {
                        (start..end)
                            .into_par_iter()
                            .map(|r| {
                                timed(t, r, &|| {
                                    cells::calibration_statistic(config, &resolved, t, r).map(|v| {
                                        vec![CellResult {
                                            t,
                                            rep: r,
                                            h1: 0.0,
                                            h2: 0.0,
                                            value: v,
                                            extra: Default::default(),
                                        }]
                                    })
                                })
                                .map(|c| c[0].value)
                            })
                            .collect::<Result<_>>()
                    })?;
                    budget_left -= values.len();
                    cp.calibration.extend(values);
                    save_checkpoint(&config.output_dir, &cp)?;
                }
                lambda = Some(report::calibrated_lambda(&cp.calibration)?);
            }
        }
    }

    let all: Vec<(usize, usize)> = (0..config.t_ladder.len())
        .flat_map(|i| (0..config.replications).map(move |r| (i, r)))
        .collect();
    let done: std::collections::HashSet<(usize, usize)> = cp.cells.iter().map(|(i, r, _)| (*i, *r)).collect();
    let pending: Vec<(usize, usize)> = all.iter().copied().filter(|c| !done.contains(c)).collect();
    for batch in pending.chunks(chunk) {
        if budget_left == 0 {
            return Ok(Progress::Interrupted {
                done: cp.cells.len(),
                total: all.len(),
            });
        }
        let batch = &batch[..batch.len().min(budget_left)];
        let results: Vec<(usize, usize, Vec<CellResult>)> = pool.install(|| {
            batch
                .par_iter()
                .map(|&(i, r)| {
                    let t = config.t_ladder[i];
                    timed(t, r, &|| cells::run_cell(config, &resolved, t, r, lambda)).map(|c| (i, r, c))
                })
                .collect::<Result<_>>()
        })?;
        budget_left -= results.len();
        cp.cells.extend(results);
        save_checkpoint(&config.output_dir, &cp)?;
    }

    let mut rows: Vec<CellResult> = cp.cells.iter().flat_map(|(_, _, c)| c.iter().cloned()).collect();
    rows.sort_by(|a, b| {
        (a.t, a.rep, a.h1, a.h2)
            .partial_cmp(&(b.t, b.rep, b.h1, b.h2))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let report = report::build_report(config, &resolved, rows, lambda, &cp.calibration)?;
    write_atomic(
        &config.output_dir.join("report.json"),
        &serde_json::to_vec_pretty(&report)?,
    )?;
    emit_report(&report, ReportFormat::Csv, &config.output_dir)?;
    Ok(Progress::Complete(report))
}
