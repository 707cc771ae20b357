//! Kernel estimation of the invariant density from one observed path,
//! `ρ̂(x, y) = (1/T) ∫₀ᵀ K_{h₁,h₂}(x − X_s, y − Y_s) ds`, evaluated as a
//! left-endpoint Riemann sum on an [`EvalGrid`].
//!
//! Higher-order kernels can make `ρ̂` negative; values are never clipped.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::{EvalGrid, Scaled, Scatter};
use crate::kernels::{ProductKernel, UnivariateKernel};
use crate::model::{
    stationary_start, stream_em, stream_free_exact, Damping, Diffusion, ModelSpec, PositionUpdate, Potential, StartRule,
};
use crate::rates::{psi_variance_scale, SmoothnessParams};
use crate::rng::cell_seed;
use crate::trajectory::Trajectory;

/// Sampling and mesh requirements tying `dt` and `δ` to the bandwidths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimationConfig {
    /// `dt ≤ dt_factor · (h₁ ∧ h₂)²`
    pub dt_factor: f64,
    /// `δ ≤ mesh_fraction · (h₁ ∧ h₂)`
    pub mesh_fraction: f64,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        Self {
            dt_factor: 0.5,
            mesh_fraction: 0.5,
        }
    }
}

impl EstimationConfig {
    pub fn check_step(&self, dt: f64, h_min: f64) -> Result<()> {
        let limit = self.dt_factor * h_min * h_min;
        if dt > limit * (1.0 + 1e-12) {
            return Err(Error::StepTooCoarse {
                dt,
                factor: self.dt_factor,
                limit,
            });
        }
        Ok(())
    }

    pub fn check(&self, dt: f64, h1: f64, h2: f64, grid: &EvalGrid) -> Result<()> {
        check_bandwidths(h1, h2)?;
        if grid.is_empty() {
            return Err(Error::EmptyGrid);
        }
        let h_min = h1.min(h2);
        self.check_step(dt, h_min)?;
        grid.check_mesh(h_min, self.mesh_fraction)
    }
}

pub(crate) fn check_bandwidths(h1: f64, h2: f64) -> Result<()> {
    for (name, h) in [("h1", h1), ("h2", h2)] {
        if !(h > 0.0 && h.is_finite()) {
            return Err(invalid(name, format!("bandwidth must be positive, got {h}")));
        }
    }
    Ok(())
}

pub(crate) fn kernel_id(kernel: &ProductKernel) -> String {
    format!("order{}x{}", kernel.k1.order, kernel.k2.order)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityEstimate {
    pub grid: EvalGrid,
    pub values: Vec<f64>,
    pub h1: f64,
    pub h2: f64,
    #[serde(rename = "T")]
    pub t: f64,
    pub kernel_id: String,
}

impl DensityEstimate {
    /// `Σ ρ̂ · (cell volume)` over the grid.
    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.cell_volume()
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Negative values set to zero, for presentation only.
    pub fn clipped(&self) -> Self {
        Self {
            values: self.values.iter().map(|v| v.max(0.0)).collect(),
            ..self.clone()
        }
    }

    /// CSV with columns `x1..xd, y1..yd, value`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_grid_csv(&self.grid, &[("value", &self.values)], writer)
    }
}

pub(crate) fn write_grid_csv<W: Write>(grid: &EvalGrid, columns: &[(&str, &[f64])], writer: W) -> Result<()> {
    let mut w = std::io::BufWriter::new(writer);
    let d = grid.d;
    let mut head: Vec<String> = (1..=d).map(|i| format!("x{i}")).collect();
    head.extend((1..=d).map(|i| format!("y{i}")));
    head.extend(columns.iter().map(|(n, _)| n.to_string()));
    writeln!(w, "{}", head.join(","))?;
    let mut p = vec![0.0; 2 * d];
    for i in 0..grid.len() {
        grid.point_into(i, &mut p);
        let mut fields: Vec<String> = p.iter().map(|v| v.to_string()).collect();
        fields.extend(columns.iter().map(|(_, vals)| vals[i].to_string()));
        writeln!(w, "{}", fields.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Streaming form of [`estimate_density`]: feed `(X_k, Y_k)` for `k < n`.
pub struct DensityAccumulator<'a> {
    scatter: Scatter<Scaled<'a>, Scaled<'a>>,
    grid: EvalGrid,
    kernel_id: String,
    h1: f64,
    h2: f64,
    samples: u64,
}

impl<'a> DensityAccumulator<'a> {
    pub fn new(kernel: &'a ProductKernel, h1: f64, h2: f64, grid: &EvalGrid) -> Result<Self> {
        check_bandwidths(h1, h2)?;
        if grid.d != kernel.d {
            return Err(Error::GridMismatch(format!(
                "grid d = {} but kernel d = {}",
                grid.d, kernel.d
            )));
        }
        Ok(Self {
            scatter: Scatter::new(grid, Scaled::new(&kernel.k1, h1), Scaled::new(&kernel.k2, h2), 1),
            grid: grid.clone(),
            kernel_id: kernel_id(kernel),
            h1,
            h2,
            samples: 0,
        })
    }

    #[inline]
    pub fn push(&mut self, x: &[f64], y: &[f64]) {
        self.scatter.push(x, y, &[1.0]);
        self.samples += 1;
    }

    pub fn samples(&self) -> u64 {
        self.samples
    }

    /// Estimate for horizon `t = samples · dt`.
    pub fn finish(self, t: f64) -> Result<DensityEstimate> {
        if self.samples == 0 {
            return Err(invalid("T", "no samples accumulated"));
        }
        let values = self.scatter.channel(0, 1.0 / self.samples as f64);
        Ok(DensityEstimate {
            grid: self.grid,
            values,
            h1: self.h1,
            h2: self.h2,
            t,
            kernel_id: self.kernel_id,
        })
    }
}

/// Riemann-sum estimator `(dt/T) Σ_{k<n} K_{h₁,h₂}(z − Z_k)` with the default [`EstimationConfig`].
pub fn estimate_density(
    traj: &Trajectory,
    kernel: &ProductKernel,
    h1: f64,
    h2: f64,
    grid: &EvalGrid,
) -> Result<DensityEstimate> {
    estimate_density_with(traj, kernel, h1, h2, grid, &EstimationConfig::default())
}

pub fn estimate_density_with(
    traj: &Trajectory,
    kernel: &ProductKernel,
    h1: f64,
    h2: f64,
    grid: &EvalGrid,
    config: &EstimationConfig,
) -> Result<DensityEstimate> {
    config.check(traj.dt, h1, h2, grid)?;
    if traj.d != grid.d {
        return Err(Error::GridMismatch(format!(
            "trajectory d = {} but grid d = {}",
            traj.d, grid.d
        )));
    }
    if traj.n_steps == 0 {
        return Err(invalid("T", "trajectory has no steps"));
    }
    let mut acc = DensityAccumulator::new(kernel, h1, h2, grid)?;
    for k in 0..traj.n_steps {
        acc.push(traj.x_at(k), traj.y_at(k));
    }
    acc.finish(traj.horizon())
}

/// `max_grid |ρ̂ − ρ|`. A lower surrogate of the sup over `D`; see [`mesh_slack`].
pub fn supnorm_risk<F: Fn(&[f64]) -> f64>(grid: &EvalGrid, values: &[f64], truth: F) -> f64 {
    let mut p = vec![0.0; 2 * grid.d];
    let mut worst: f64 = 0.0;
    for (i, v) in values.iter().enumerate() {
        grid.point_into(i, &mut p);
        worst = worst.max((v - truth(&p)).abs());
    }
    worst
}

/// Largest change of the error `ρ̂ − ρ` between mesh neighbours: the amount by
/// which the sup over `D` may exceed the mesh maximum, to first order in `δ`.
pub fn mesh_slack<F: Fn(&[f64]) -> f64>(grid: &EvalGrid, values: &[f64], truth: F) -> f64 {
    let errors: Vec<f64> = (0..grid.len()).map(|i| values[i] - truth(&grid.point(i))).collect();
    let mut slack: f64 = 0.0;
    grid.for_each_edge(|a, b| slack = slack.max((errors[a] - errors[b]).abs()));
    slack
}

/// `L₁ h₁^{β₁} + L₂ h₂^{β₂}`.
pub fn bias_bound(h1: f64, h2: f64, params: &SmoothnessParams) -> f64 {
    params.l1 * h1.powf(params.beta1) + params.l2 * h2.powf(params.beta2)
}

/// Replicated time averages `(1/T)∫₀ᵀ f(Z_s) ds` of a localised bump
/// `f = Π K((c_x − x)/s₁) K((c_y − y)/s₂)` at one scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceProbe {
    pub s1: f64,
    pub s2: f64,
    #[serde(rename = "T")]
    pub t: f64,
    pub reps: usize,
    pub mean: f64,
    pub variance: f64,
    /// Standard error of `variance` from the sample fourth moment.
    pub variance_se: f64,
    /// `T⁻¹ ‖f‖²_∞ ψ(s₁, s₂, T)² (s₁ s₂)^{2d}` with `ψ°` when `refined`.
    pub bound: f64,
    pub refined: bool,
}

/// Simulation settings for variance probes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub t: f64,
    pub dt: f64,
    pub reps: usize,
    pub seed: u64,
}

fn is_free(model: &ModelSpec) -> Option<f64> {
    match (&model.damping, &model.potential, &model.diffusion) {
        (Damping::Scalar(g), Potential::Zero, Diffusion::Scalar(s)) if *g == 0.0 && *s > 0.0 => Some(*s),
        _ => None,
    }
}

/// Variance of the time average at one `(s₁, s₂)`; see [`variance_ladder`].
pub fn variance_experiment(
    model: &ModelSpec,
    center: &[f64],
    s1: f64,
    s2: f64,
    config: &ProbeConfig,
    kernel: &UnivariateKernel,
) -> Result<VarianceProbe> {
    Ok(variance_ladder(model, center, &[(s1, s2)], config, kernel)?.remove(0))
}

/// Variance of `(1/T)∫ f` for several scales from the same replications.
///
/// The free model (`c = 0`, `V = 0`) is sampled exactly from `z₀ = 0`;
/// other models run Euler–Maruyama from a stationary start.
pub fn variance_ladder(
    model: &ModelSpec,
    center: &[f64],
    scales: &[(f64, f64)],
    config: &ProbeConfig,
    kernel: &UnivariateKernel,
) -> Result<Vec<VarianceProbe>> {
    if config.reps < 2 {
        return Err(invalid("reps", "need at least two replications"));
    }
    probe_bounds(model.d, center, scales, config.t, kernel)?;
    let averages: Vec<Vec<f64>> = (0..config.reps)
        .into_par_iter()
        .map(|rep| probe_time_averages(model, center, scales, config, kernel, rep as u64))
        .collect::<Result<_>>()?;
    summarize_probes(model.d, center, scales, config.t, kernel, &averages)
}

/// `T⁻¹ ‖f‖²_∞ ψ² (s₁s₂)^{2d}` for every scale, `ψ°` when the velocity centre is nonzero.
pub fn probe_bounds(
    d: usize,
    center: &[f64],
    scales: &[(f64, f64)],
    t: f64,
    kernel: &UnivariateKernel,
) -> Result<Vec<f64>> {
    if center.len() != 2 * d {
        return Err(invalid("center", format!("expected {} coordinates", 2 * d)));
    }
    if scales.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let sup = kernel.sup_norm.powi(2 * d as i32);
    let refined = center[d..].iter().any(|v| *v != 0.0);
    scales
        .iter()
        .map(|&(s1, s2)| {
            let psi = psi_variance_scale(s1, s2, d, t, refined)?;
            Ok(sup * sup * psi * psi * (s1 * s2).powi(2 * d as i32) / t)
        })
        .collect()
}

/// One replication of the time averages for every scale; the seed is
/// `cell_seed(config.seed, T, rep)`.
pub fn probe_time_averages(
    model: &ModelSpec,
    center: &[f64],
    scales: &[(f64, f64)],
    config: &ProbeConfig,
    kernel: &UnivariateKernel,
    rep: u64,
) -> Result<Vec<f64>> {
    let d = model.d;
    if center.len() != 2 * d {
        return Err(invalid("center", format!("expected {} coordinates", 2 * d)));
    }
    let n_steps = (config.t / config.dt).round() as usize;
    if n_steps == 0 {
        return Err(invalid("T", "horizon shorter than one step"));
    }
    let seed = cell_seed(config.seed, config.t, rep);
    let mut sums = vec![0.0; scales.len()];
    let mut visit = |x: &[f64], y: &[f64], _: &[f64]| {
        for (acc, &(s1, s2)) in sums.iter_mut().zip(scales) {
            let mut v = 1.0;
            for i in 0..d {
                v *= kernel.eval((center[i] - x[i]) / s1) * kernel.eval((center[d + i] - y[i]) / s2);
                if v == 0.0 {
                    break;
                }
            }
            *acc += v;
        }
    };
    match is_free(model) {
        Some(sigma0) => {
            stream_free_exact(&vec![0.0; 2 * d], n_steps, config.dt, sigma0, seed, &mut visit)?;
        }
        None => {
            let rule = if model.gibbs_parameters().is_some() {
                StartRule::Gibbs
            } else {
                StartRule::Burn {
                    anchor: vec![0.0; 2 * d],
                }
            };
            let z0 = stationary_start(model, model.default_burn_in(), config.dt, seed, &rule)?;
            stream_em(model, &z0, n_steps, config.dt, seed, PositionUpdate::Euler, &mut visit)?;
        }
    }
    Ok(sums.into_iter().map(|s| s / n_steps as f64).collect())
}

/// Sample variance (with fourth-moment standard error) per scale from
/// per-replication time averages `averages[rep][scale]`.
pub fn summarize_probes(
    d: usize,
    center: &[f64],
    scales: &[(f64, f64)],
    t: f64,
    kernel: &UnivariateKernel,
    averages: &[Vec<f64>],
) -> Result<Vec<VarianceProbe>> {
    if averages.len() < 2 {
        return Err(invalid("reps", "need at least two replications"));
    }
    let bounds = probe_bounds(d, center, scales, t, kernel)?;
    let refined = center[d..].iter().any(|v| *v != 0.0);
    let r = averages.len() as f64;
    Ok(scales
        .iter()
        .enumerate()
        .map(|(k, &(s1, s2))| {
            let vals: Vec<f64> = averages.iter().map(|a| a[k]).collect();
            let mean = vals.iter().sum::<f64>() / r;
            let m2 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / r;
            let m4 = vals.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / r;
            VarianceProbe {
                s1,
                s2,
                t,
                reps: averages.len(),
                mean,
                variance: m2 * r / (r - 1.0),
                variance_se: ((m4 - m2 * m2).max(0.0) / r).sqrt(),
                bound: bounds[k],
                refined,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{simulate_em, GibbsDensity};
    use crate::rates::{bandwidth_from_smoothness, RegimeKey, Target};

    fn constant_path(z: [f64; 2], n: usize, dt: f64) -> Trajectory {
        Trajectory {
            model_id: "const".into(),
            d: 1,
            dt,
            n_steps: n,
            seed: 0,
            burn_in: 0.0,
            x: vec![z[0]; n + 1],
            y: vec![z[1]; n + 1],
        }
    }

    #[test]
    fn constant_path_gives_kernel_peak() {
        let kernel = ProductKernel::of_orders(1, 1, 1).unwrap();
        let grid = EvalGrid::isotropic(1, (-1.0, 1.0), (-1.0, 1.0), 0.05).unwrap();
        let (h1, h2) = (0.2, 0.4);
        let est = estimate_density(&constant_path([0.0, 0.0], 100, 0.01), &kernel, h1, h2, &grid).unwrap();
        let mut p = vec![0.0; 2];
        for (i, v) in est.values.iter().enumerate() {
            grid.point_into(i, &mut p);
            if p[0].abs() < 1e-12 && p[1].abs() < 1e-12 {
                assert!((v - 1.0 / (h1 * h2)).abs() < 1e-9);
            }
            if p[0].abs() > h1 / 2.0 + 1e-9 || p[1].abs() > h2 / 2.0 + 1e-9 {
                assert_eq!(*v, 0.0);
            }
        }
        assert!((est.mass() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn preconditions_enforced() {
        let kernel = ProductKernel::of_orders(1, 1, 1).unwrap();
        let grid = EvalGrid::isotropic(1, (-1.0, 1.0), (-1.0, 1.0), 0.05).unwrap();
        let path = constant_path([0.0, 0.0], 10, 0.1);
        assert!(matches!(
            estimate_density(&path, &kernel, 0.2, 0.2, &grid),
            Err(Error::StepTooCoarse { .. })
        ));
        let coarse = EvalGrid::isotropic(1, (-1.0, 1.0), (-1.0, 1.0), 0.5).unwrap();
        assert!(estimate_density(&constant_path([0.0, 0.0], 10, 0.001), &kernel, 0.2, 0.2, &coarse).is_err());
        assert!(estimate_density(&path, &kernel, 0.0, 0.2, &grid).is_err());
    }

    #[test]
    fn risk_and_slack_basics() {
        let grid = EvalGrid::isotropic(1, (0.0, 1.0), (0.0, 1.0), 0.5).unwrap();
        let mut values = vec![0.0; grid.len()];
        assert_eq!(supnorm_risk(&grid, &values, |_| 0.0), 0.0);
        values[4] = 0.3;
        assert_eq!(supnorm_risk(&grid, &values, |_| 0.0), 0.3);
        assert!((mesh_slack(&grid, &values, |_| 0.0) - 0.3).abs() < 1e-15);
        let truth = |p: &[f64]| p[0] + 2.0 * p[1];
        let exact: Vec<f64> = grid.points().map(|p| truth(&p)).collect();
        assert_eq!(supnorm_risk(&grid, &exact, truth), 0.0);
    }

    #[test]
    fn bias_bound_limits() {
        let p = SmoothnessParams::new(2.0, 3.0, 1.5, 0.5).unwrap();
        assert_eq!(bias_bound(0.0, 0.0, &p), 0.0);
        assert!((bias_bound(0.1, 0.2, &p) - (1.5 * 0.01 + 0.5 * 0.008)).abs() < 1e-15);
        let p = SmoothnessParams::isotropic_constants(2.0, 3.0).unwrap();
        let key = RegimeKey::from_params(&p, 1, 0.5).unwrap();
        let (h1, h2) = bandwidth_from_smoothness(1e5, &p, &key, Target::Density).unwrap();
        assert!((h1.powf(2.0) - h2.powf(3.0)).abs() < 1e-12);
    }

    #[test]
    fn gibbs_benchmark_mass_and_shape() {
        let model = ModelSpec::langevin(1, 1.0, 1.0).unwrap();
        let gibbs = GibbsDensity::new(&model).unwrap();
        let z0 = stationary_start(&model, 0.0, 0.01, 3, &StartRule::Gibbs).unwrap();
        let traj = simulate_em(&model, &z0, 2000.0, 0.01, 3).unwrap();
        let kernel = ProductKernel::of_orders(1, 1, 1).unwrap();
        let cover = EvalGrid::isotropic(1, (-4.0, 4.0), (-4.0, 4.0), 0.1).unwrap();
        let est = estimate_density(&traj, &kernel, 0.3, 0.3, &cover).unwrap();
        assert!((est.mass() - 1.0).abs() < 0.02, "{}", est.mass());
        let risk = supnorm_risk(&cover, &est.values, |p| gibbs.density(&p[..1], &p[1..]));
        assert!(risk < 0.15 * gibbs.sup_norm(), "{risk}");
    }

    #[test]
    fn variance_probe_validation() {
        let model = ModelSpec::free(1, 1.0).unwrap();
        let k = UnivariateKernel::uniform();
        let cfg = ProbeConfig {
            t: 10.0,
            dt: 0.01,
            reps: 1,
            seed: 1,
        };
        assert!(variance_experiment(&model, &[0.0, 1.0], 0.5, 0.5, &cfg, &k).is_err());
        let cfg = ProbeConfig { reps: 200, ..cfg };
        let p = variance_experiment(&model, &[0.0, 1.0], 0.5, 0.5, &cfg, &k).unwrap();
        assert!(p.refined && p.variance > 0.0 && p.bound > 0.0);
        let q = variance_experiment(&model, &[0.0, 1.0], 0.5, 0.5, &cfg, &k).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn time_average_variance_below_marginal_variance() {
        let model = ModelSpec::langevin(1, 1.0, 1.0).unwrap();
        let k = UnivariateKernel::uniform();
        let cfg = ProbeConfig {
            t: 200.0,
            dt: 0.02,
            reps: 100,
            seed: 4,
        };
        let p = variance_experiment(&model, &[0.0, 0.0], 1.0, 1.0, &cfg, &k).unwrap();
        // f ∈ {0, 1}: Var f(Z₀) = m(1 − m)
        assert!(p.variance < p.mean * (1.0 - p.mean), "{p:?}");
    }
}
