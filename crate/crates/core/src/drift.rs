//! Drift estimation: the Itô-sum numerator `b̄`, its Nadaraya-Watson ratio
//! with the density estimate, and Lepski-type bandwidth selection.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binning::{finish_velocity, smooth_position, OccupationBins, Tensor};
use crate::density::{check_bandwidths, kernel_id, write_grid_csv, DensityEstimate, EstimationConfig};
use crate::error::{invalid, Error, Result};
use crate::grid::{EvalGrid, Scaled, Scatter};
use crate::kernels::{BandwidthGrid, ConvolutionConfig, ConvolvedKernel, ProductKernel, UnivariateKernel};
use crate::model::{GibbsDensity, ModelSpec};
use crate::quad::GaussLegendre;
use crate::rates::{truncation_r_t, SmoothnessParams};
use crate::trajectory::Trajectory;

/// `b̄_j` on a grid. `j` is 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftNumeratorEstimate {
    pub grid: EvalGrid,
    pub j: usize,
    pub values: Vec<f64>,
    pub h1: f64,
    pub h2: f64,
    pub conv_eta: Option<(f64, f64)>,
    #[serde(rename = "T")]
    pub t: f64,
}

impl DriftNumeratorEstimate {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_grid_csv(&self.grid, &[("value", &self.values)], writer)
    }
}

fn check_component(j: usize, d: usize) -> Result<()> {
    if j == 0 || j > d {
        return Err(invalid("j", format!("component index must lie in 1..={d}, got {j}")));
    }
    Ok(())
}

fn check_trajectory(traj: &Trajectory, grid: &EvalGrid) -> Result<()> {
    if traj.d != grid.d {
        return Err(Error::GridMismatch(format!(
            "trajectory d = {} but grid d = {}",
            traj.d, grid.d
        )));
    }
    if traj.n_steps == 0 {
        return Err(invalid("T", "trajectory has no steps"));
    }
    Ok(())
}

/// Streams `(X_k, Y_k, ΔY_k)` into the density and all `d` numerators at once.
pub struct DriftAccumulator<'a> {
    scatter: Scatter<Scaled<'a>, Scaled<'a>>,
    grid: EvalGrid,
    kernel_id: String,
    h1: f64,
    h2: f64,
    samples: u64,
    weights: Vec<f64>,
}

impl<'a> DriftAccumulator<'a> {
    pub fn new(kernel: &'a ProductKernel, h1: f64, h2: f64, grid: &EvalGrid) -> Result<Self> {
        check_bandwidths(h1, h2)?;
        if grid.d != kernel.d {
            return Err(Error::GridMismatch(format!(
                "grid d = {} but kernel d = {}",
                grid.d, kernel.d
            )));
        }
        Ok(Self {
            scatter: Scatter::new(
                grid,
                Scaled::new(&kernel.k1, h1),
                Scaled::new(&kernel.k2, h2),
                1 + grid.d,
            ),
            grid: grid.clone(),
            kernel_id: kernel_id(kernel),
            h1,
            h2,
            samples: 0,
            weights: vec![1.0; 1 + grid.d],
        })
    }

    #[inline]
    pub fn push(&mut self, x: &[f64], y: &[f64], dy: &[f64]) {
        self.weights[1..].copy_from_slice(dy);
        self.scatter.push(x, y, &self.weights);
        self.samples += 1;
    }

    /// Density estimate and numerators `j = 1..=d` for horizon `t`.
    pub fn finish(self, t: f64) -> Result<(DensityEstimate, Vec<DriftNumeratorEstimate>)> {
        if self.samples == 0 {
            return Err(invalid("T", "no samples accumulated"));
        }
        let density = DensityEstimate {
            grid: self.grid.clone(),
            values: self.scatter.channel(0, 1.0 / self.samples as f64),
            h1: self.h1,
            h2: self.h2,
            t,
            kernel_id: self.kernel_id.clone(),
        };
        let numerators = (1..=self.grid.d)
            .map(|j| DriftNumeratorEstimate {
                grid: self.grid.clone(),
                j,
                values: self.scatter.channel(j, 1.0 / t),
                h1: self.h1,
                h2: self.h2,
                conv_eta: None,
                t,
            })
            .collect();
        Ok((density, numerators))
    }
}

/// `(1/T) Σ_k K_{h₁,h₂}(z − Z_k)(Y^j_{k+1} − Y^j_k)`.
pub fn estimate_numerator(
    traj: &Trajectory,
    j: usize,
    kernel: &ProductKernel,
    h1: f64,
    h2: f64,
    grid: &EvalGrid,
) -> Result<DriftNumeratorEstimate> {
    estimate_numerator_with(traj, j, kernel, h1, h2, grid, &EstimationConfig::default())
}

pub fn estimate_numerator_with(
    traj: &Trajectory,
    j: usize,
    kernel: &ProductKernel,
    h1: f64,
    h2: f64,
    grid: &EvalGrid,
    config: &EstimationConfig,
) -> Result<DriftNumeratorEstimate> {
    check_component(j, grid.d)?;
    config.check(traj.dt, h1, h2, grid)?;
    check_trajectory(traj, grid)?;
    let mut scatter = Scatter::new(grid, Scaled::new(&kernel.k1, h1), Scaled::new(&kernel.k2, h2), 1);
    traj.for_each_increment(|x, y, dy| scatter.push(x, y, &dy[j - 1..j]));
    let t = traj.horizon();
    Ok(DriftNumeratorEstimate {
        grid: grid.clone(),
        j,
        values: scatter.channel(0, 1.0 / t),
        h1,
        h2,
        conv_eta: None,
        t,
    })
}

/// Itô sum against `K_{h} ∗ K_{η}`. Requires a symmetric kernel, so the
/// orientation of the argument is immaterial.
pub fn estimate_numerator_conv(
    traj: &Trajectory,
    j: usize,
    kernel: &ProductKernel,
    h: (f64, f64),
    eta: (f64, f64),
    grid: &EvalGrid,
) -> Result<DriftNumeratorEstimate> {
    estimate_numerator_conv_with(
        traj,
        j,
        kernel,
        h,
        eta,
        grid,
        &EstimationConfig::default(),
        ConvolutionConfig::default(),
    )
}

#[allow(clippy::too_many_arguments)]
pub fn estimate_numerator_conv_with(
    traj: &Trajectory,
    j: usize,
    kernel: &ProductKernel,
    h: (f64, f64),
    eta: (f64, f64),
    grid: &EvalGrid,
    config: &EstimationConfig,
    conv: ConvolutionConfig,
) -> Result<DriftNumeratorEstimate> {
    check_component(j, grid.d)?;
    check_bandwidths(h.0, h.1)?;
    check_bandwidths(eta.0, eta.1)?;
    if !kernel.is_symmetric() {
        return Err(invalid("kernel", "convolved estimator needs a symmetric kernel"));
    }
    let h_min = h.0.min(h.1).min(eta.0).min(eta.1);
    config.check(traj.dt, h_min, h_min, grid)?;
    check_trajectory(traj, grid)?;
    let kx = ConvolvedKernel::new(&kernel.k1, h.0, eta.0, conv)?;
    let ky = ConvolvedKernel::new(&kernel.k2, h.1, eta.1, conv)?;
    let mut scatter = Scatter::new(grid, kx, ky, 1);
    traj.for_each_increment(|x, y, dy| scatter.push(x, y, &dy[j - 1..j]));
    let t = traj.horizon();
    Ok(DriftNumeratorEstimate {
        grid: grid.clone(),
        j,
        values: scatter.channel(0, 1.0 / t),
        h1: h.0,
        h2: h.1,
        conv_eta: Some(eta),
        t,
    })
}

/// Denominator stabilization of the Nadaraya-Watson ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Stabilizer {
    /// `b̄ / (|ρ̂| + r_T)`
    RT(f64),
    /// `b̄ / (ρ̂ ∨ ρ⋆)`
    RhoStar(f64),
}

impl Stabilizer {
    /// Parses `rT:β₁,β₂` (evaluated at horizon `t`) or `rhostar:value`.
    pub fn parse(spec: &str, t: f64, d: usize) -> Result<Self> {
        let (kind, arg) = spec
            .split_once(':')
            .ok_or_else(|| invalid("stabilizer", format!("expected rT:b1,b2 or rhostar:v, got {spec}")))?;
        let num = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| invalid("stabilizer", format!("not a number: {s}")))
        };
        match kind {
            "rT" | "rt" => {
                let (b1, b2) = arg
                    .split_once(',')
                    .ok_or_else(|| invalid("stabilizer", "rT needs two smoothness values"))?;
                let params = SmoothnessParams::isotropic_constants(num(b1)?, num(b2)?)?;
                Ok(Self::RT(truncation_r_t(t, &params, d)?))
            }
            "rhostar" => Ok(Self::RhoStar(num(arg)?)),
            other => Err(invalid("stabilizer", format!("unknown kind {other}"))),
        }
    }

    pub fn value(&self) -> f64 {
        match *self {
            Self::RT(v) | Self::RhoStar(v) => v,
        }
    }
}

/// Pointwise `b̂ = b̄ / denominator`.
pub fn nw_drift(
    numerator: &DriftNumeratorEstimate,
    rho_hat: &DensityEstimate,
    stabilizer: Stabilizer,
) -> Result<Vec<f64>> {
    if numerator.grid != rho_hat.grid {
        return Err(Error::GridMismatch("numerator and density grids differ".into()));
    }
    nw_ratio(&numerator.values, &rho_hat.values, stabilizer)
}

/// [`nw_drift`] on bare value slices.
pub fn nw_ratio(numerator: &[f64], rho_hat: &[f64], stabilizer: Stabilizer) -> Result<Vec<f64>> {
    let s = stabilizer.value();
    if !(s > 0.0 && s.is_finite()) {
        return Err(invalid("stabilizer", format!("must be positive, got {s}")));
    }
    if numerator.len() != rho_hat.len() {
        return Err(Error::GridMismatch("value lengths differ".into()));
    }
    Ok(numerator
        .iter()
        .zip(rho_hat)
        .map(|(b, r)| match stabilizer {
            Stabilizer::RT(rt) => b / (r.abs() + rt),
            Stabilizer::RhoStar(rs) => b / r.max(rs),
        })
        .collect())
}

/// Half the smallest pilot value, floored at `1e-4`.
pub fn default_rho_star(pilot: &DensityEstimate) -> f64 {
    (0.5 * pilot.min_value()).max(1e-4)
}

/// Largest quadratic-variation rate `Σ (ΔY^j)² / Δt` over `blocks` equal time blocks.
pub fn realized_a_jj(traj: &Trajectory, j: usize, blocks: usize) -> Result<f64> {
    check_component(j, traj.d)?;
    let blocks = blocks.clamp(1, traj.n_steps.max(1));
    let per = traj.n_steps / blocks;
    if per == 0 {
        return Err(invalid("T", "trajectory has no steps"));
    }
    let mut worst: f64 = 0.0;
    for b in 0..blocks {
        let mut qv = 0.0;
        for k in b * per..(b + 1) * per {
            let dy = traj.y_at(k + 1)[j - 1] - traj.y_at(k)[j - 1];
            qv += dy * dy;
        }
        worst = worst.max(qv / (per as f64 * traj.dt));
    }
    Ok(worst)
}

/// Plug-in constants of the threshold `A_t^{(q)}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveConstants {
    pub rho_sup: f64,
    pub a_jj_sup: f64,
    #[serde(rename = "C1_tilde")]
    pub c1_tilde: f64,
    #[serde(rename = "C2_tilde")]
    pub c2_tilde: f64,
    #[serde(rename = "K_sup")]
    pub k_sup: f64,
    #[serde(rename = "K_l2")]
    pub k_l2: f64,
}

impl AdaptiveConstants {
    /// `‖ρ‖∞` from the pilot maximum plus 10 %, kernel norms from `kernel`.
    pub fn from_pilot(pilot: &DensityEstimate, a_jj_sup: f64, kernel: &ProductKernel, c1: f64, c2: f64) -> Self {
        Self {
            rho_sup: 1.1 * pilot.max_value(),
            a_jj_sup,
            c1_tilde: c1,
            c2_tilde: c2,
            k_sup: kernel.sup_norm(),
            k_l2: kernel.l2_norm(),
        }
    }

    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("rho_sup", self.rho_sup),
            ("a_jj_sup", self.a_jj_sup),
            ("C1_tilde", self.c1_tilde),
            ("C2_tilde", self.c2_tilde),
            ("K_sup", self.k_sup),
            ("K_l2", self.k_l2),
        ] {
            if !(v > 0.0) || v.is_nan() {
                return Err(invalid(name, format!("constant must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// `4e √(d‖ρ‖∞) (8C̃₁‖K‖∞ + C̃₂ √(2q‖a_jj‖∞) ‖K‖₂) √(log(η₁⁻¹ + η₂⁻¹) / (t (η₁η₂)^d))`.
pub fn threshold_a(t: f64, eta: (f64, f64), q: f64, d: usize, c: &AdaptiveConstants) -> Result<f64> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(invalid("t", format!("horizon must be positive, got {t}")));
    }
    if !(q >= 1.0) {
        return Err(invalid("q", format!("must be at least 1, got {q}")));
    }
    if d < 1 {
        return Err(invalid("d", "half dimension must be at least 1"));
    }
    for v in [eta.0, eta.1] {
        if !(v > 0.0 && v <= 1.0) {
            return Err(invalid("eta", format!("bandwidth must lie in (0, 1], got {v}")));
        }
    }
    c.validate()?;
    let d_f = d as f64;
    let lead = 4.0 * std::f64::consts::E * (d_f * c.rho_sup).sqrt();
    let mix = 8.0 * c.c1_tilde * c.k_sup + c.c2_tilde * (2.0 * q * c.a_jj_sup).sqrt() * c.k_l2;
    let log = (eta.0.recip() + eta.1.recip()).ln();
    Ok(lead * mix * (log / (t * (eta.0 * eta.1).powf(d_f))).sqrt())
}

/// Every candidate `b̄_η` plus `‖b̄_{h,η} − b̄_η‖` over the eval grid for all pairs.
#[derive(Debug, Clone)]
pub struct CandidateTable {
    pub pairs: Vec<(f64, f64)>,
    /// `singles[k] = b̄_{η_k}` on the eval grid.
    pub singles: Vec<Vec<f64>>,
    /// `sup_diff[i][k] = max_grid |b̄_{h_i,η_k} − b̄_{η_k}|`.
    pub sup_diff: Vec<Vec<f64>>,
}

fn sup_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (u, v)| m.max((u - v).abs()))
}

fn assemble(pairs: Vec<(f64, f64)>, singles: Vec<Vec<f64>>, cross: Vec<((usize, usize), Vec<f64>)>) -> CandidateTable {
    let n = pairs.len();
    let mut sup_diff = vec![vec![0.0; n]; n];
    for ((i, k), v) in cross {
        sup_diff[i][k] = sup_abs_diff(&v, &singles[k]);
        sup_diff[k][i] = sup_abs_diff(&v, &singles[i]);
    }
    CandidateTable {
        pairs,
        singles,
        sup_diff,
    }
}

fn upper_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (i..n).map(move |k| (i, k))).collect()
}

impl CandidateTable {
    /// Direct Itô sums for every estimator; cost grows with the square of the grid size.
    pub fn exact(
        traj: &Trajectory,
        j: usize,
        kernel: &ProductKernel,
        candidates: &BandwidthGrid,
        eval: &EvalGrid,
        config: &EstimationConfig,
        conv: ConvolutionConfig,
    ) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::EmptyCandidateGrid);
        }
        check_component(j, eval.d)?;
        check_trajectory(traj, eval)?;
        let h_min = candidates.smallest_bandwidth();
        config.check(traj.dt, h_min, h_min, eval)?;
        let pairs = candidates.pairs();
        let singles = pairs
            .par_iter()
            .map(|&(h1, h2)| estimate_numerator_with(traj, j, kernel, h1, h2, eval, config).map(|e| e.values))
            .collect::<Result<Vec<_>>>()?;
        let cross = upper_pairs(pairs.len())
            .into_par_iter()
            .map(|(i, k)| {
                estimate_numerator_conv_with(traj, j, kernel, pairs[i], pairs[k], eval, config, conv)
                    .map(|e| ((i, k), e.values))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(assemble(pairs, singles, cross))
    }

    /// Same table from binned occupation weights (`channel` of `bins`, already
    /// holding `ΔY^j`), scaled by `1/t`. Position passes are shared between
    /// estimators with equal position kernels.
    pub fn binned(
        bins: &OccupationBins,
        channel: usize,
        t: f64,
        kernel: &ProductKernel,
        candidates: &BandwidthGrid,
        eval: &EvalGrid,
        conv: ConvolutionConfig,
    ) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::EmptyCandidateGrid);
        }
        let pairs = candidates.pairs();
        let scale = 1.0 / t;
        let mut h1s: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        h1s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        h1s.dedup();
        let idx = |h: f64| h1s.iter().position(|&v| v == h).unwrap();
        let plain: Vec<Tensor> = h1s
            .par_iter()
            .map(|&h| smooth_position(bins, channel, eval, &Scaled::new(&kernel.k1, h)))
            .collect();
        let x_keys: Vec<(usize, usize)> = upper_pairs(h1s.len());
        let convolved: Vec<Tensor> = x_keys
            .par_iter()
            .map(|&(a, b)| {
                ConvolvedKernel::new(&kernel.k1, h1s[a], h1s[b], conv).map(|k| smooth_position(bins, channel, eval, &k))
            })
            .collect::<Result<_>>()?;
        let conv_partial = |a: usize, b: usize| {
            let key = (a.min(b), a.max(b));
            &convolved[x_keys.iter().position(|&k| k == key).unwrap()]
        };
        let singles: Vec<Vec<f64>> = pairs
            .par_iter()
            .map(|&(h1, h2)| {
                let mut v = finish_velocity(&plain[idx(h1)], bins, eval, &Scaled::new(&kernel.k2, h2));
                v.iter_mut().for_each(|x| *x *= scale);
                v
            })
            .collect();
        let cross = upper_pairs(pairs.len())
            .into_par_iter()
            .map(|(i, k)| {
                let partial = conv_partial(idx(pairs[i].0), idx(pairs[k].0));
                let ky = ConvolvedKernel::new(&kernel.k2, pairs[i].1, pairs[k].1, conv)?;
                let mut v = finish_velocity(partial, bins, eval, &ky);
                v.iter_mut().for_each(|x| *x *= scale);
                Ok(((i, k), v))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(assemble(pairs, singles, cross))
    }

    pub fn position(&self, h: (f64, f64)) -> Option<usize> {
        self.pairs
            .iter()
            .position(|p| (p.0 - h.0).abs() <= 1e-12 * h.0 && (p.1 - h.1).abs() <= 1e-12 * h.1)
    }

    /// `Δ̂(h_i) = max_k [sup_diff[i][k] − A_k]_+`.
    pub fn delta(&self, i: usize, thresholds: &[f64]) -> f64 {
        self.sup_diff[i]
            .iter()
            .zip(thresholds)
            .fold(0.0, |m, (s, a)| m.max(s - a))
    }

    /// Minimizer of `Δ̂ + A`; ties go to the lexicographically largest pair.
    pub fn select(&self, thresholds: &[f64]) -> (usize, Vec<f64>) {
        let deltas: Vec<f64> = (0..self.pairs.len()).map(|i| self.delta(i, thresholds)).collect();
        let crit: Vec<f64> = deltas.iter().zip(thresholds).map(|(d, a)| d + a).collect();
        let best = crit.iter().copied().fold(f64::INFINITY, f64::min);
        let tol = 1e-12 * best.abs();
        let chosen = (0..self.pairs.len())
            .filter(|&i| crit[i] <= best + tol)
            .max_by(|&a, &b| self.pairs[a].partial_cmp(&self.pairs[b]).unwrap())
            .unwrap();
        (chosen, deltas)
    }
}

/// A value attached to one candidate pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairValue {
    pub h1: f64,
    pub h2: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveSelection {
    pub chosen: (f64, f64),
    pub delta_values: Vec<PairValue>,
    pub thresholds: Vec<PairValue>,
    pub q: f64,
    pub constants: AdaptiveConstants,
    pub j: usize,
    #[serde(rename = "T")]
    pub t: f64,
}

impl AdaptiveSelection {
    pub fn criterion_min(&self) -> f64 {
        self.delta_values
            .iter()
            .zip(&self.thresholds)
            .map(|(d, a)| d.value + a.value)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Thresholds `A_t(η)` for every candidate.
pub fn thresholds(table: &CandidateTable, t: f64, q: f64, d: usize, constants: &AdaptiveConstants) -> Result<Vec<f64>> {
    table
        .pairs
        .iter()
        .map(|&eta| threshold_a(t, eta, q, d, constants))
        .collect()
}

/// Selection from a precomputed table.
pub fn select_from_table(
    table: &CandidateTable,
    t: f64,
    j: usize,
    q: f64,
    d: usize,
    constants: &AdaptiveConstants,
) -> Result<AdaptiveSelection> {
    if table.pairs.is_empty() {
        return Err(Error::EmptyCandidateGrid);
    }
    let a = thresholds(table, t, q, d, constants)?;
    let (chosen, deltas) = table.select(&a);
    let tag = |v: &[f64]| {
        table
            .pairs
            .iter()
            .zip(v)
            .map(|(&(h1, h2), &value)| PairValue { h1, h2, value })
            .collect()
    };
    Ok(AdaptiveSelection {
        chosen: table.pairs[chosen],
        delta_values: tag(&deltas),
        thresholds: tag(&a),
        q,
        constants: *constants,
        j,
        t,
    })
}

/// `Δ̂(h) = sup_η [‖b̄_{h,η} − b̄_η‖ − A_t(η)]_+` by direct Itô sums.
#[allow(clippy::too_many_arguments)]
pub fn delta_hat(
    traj: &Trajectory,
    j: usize,
    kernel: &ProductKernel,
    h: (f64, f64),
    candidates: &BandwidthGrid,
    eval: &EvalGrid,
    q: f64,
    constants: &AdaptiveConstants,
) -> Result<f64> {
    let table = CandidateTable::exact(
        traj,
        j,
        kernel,
        candidates,
        eval,
        &EstimationConfig::default(),
        ConvolutionConfig::default(),
    )?;
    let i = table
        .position(h)
        .ok_or_else(|| invalid("h", format!("({}, {}) is not a candidate pair", h.0, h.1)))?;
    let a = thresholds(&table, traj.horizon(), q, eval.d, constants)?;
    Ok(table.delta(i, &a))
}

/// Lepski selection `ĥ = argmin (Δ̂ + A)` by direct Itô sums.
pub fn select_bandwidth(
    traj: &Trajectory,
    j: usize,
    kernel: &ProductKernel,
    candidates: &BandwidthGrid,
    eval: &EvalGrid,
    q: f64,
    constants: &AdaptiveConstants,
) -> Result<AdaptiveSelection> {
    let table = CandidateTable::exact(
        traj,
        j,
        kernel,
        candidates,
        eval,
        &EstimationConfig::default(),
        ConvolutionConfig::default(),
    )?;
    select_from_table(&table, traj.horizon(), j, q, eval.d, constants)
}

fn axis_smooth<F: Fn(f64) -> f64>(kernel: &UnivariateKernel, h: f64, f: F, x: f64, rule: &GaussLegendre) -> f64 {
    rule.integrate_composite(-0.5, 0.5, 8, |v| kernel.poly(v) * f(x - h * v))
}

/// `E b̄_{1,h}(z) = (K_h ∗ (b ρ))(z)` for a one-dimensional Gibbs model, using
/// `b ρ = −γ ρ_x ⊗ (y ρ_y) − (V' ρ_x) ⊗ ρ_y`.
pub fn smoothed_drift_target(
    model: &ModelSpec,
    kernel: &ProductKernel,
    h: (f64, f64),
    eval: &EvalGrid,
) -> Result<Vec<f64>> {
    if model.d != 1 || eval.d != 1 {
        return Err(invalid("d", "smoothed drift target is implemented for d = 1"));
    }
    let (gamma, _) = model
        .gibbs_parameters()
        .ok_or_else(|| Error::MissingOracle(format!("model `{}` has no Gibbs product form", model.id)))?;
    let gibbs = GibbsDensity::new(model)?;
    let rule = GaussLegendre::new(kernel.k1.degree().max(kernel.k2.degree()) / 2 + 12);
    let xs: Vec<(f64, f64)> = (0..eval.axes[0].count)
        .map(|i| {
            let x = eval.axes[0].node(i);
            (
                axis_smooth(&kernel.k1, h.0, |u| gibbs.marginal_x(u), x, &rule),
                axis_smooth(
                    &kernel.k1,
                    h.0,
                    |u| model.potential.gradient_1d(u) * gibbs.marginal_x(u),
                    x,
                    &rule,
                ),
            )
        })
        .collect();
    let ys: Vec<(f64, f64)> = (0..eval.axes[1].count)
        .map(|i| {
            let y = eval.axes[1].node(i);
            (
                axis_smooth(&kernel.k2, h.1, |u| u * gibbs.marginal_y(u), y, &rule),
                axis_smooth(&kernel.k2, h.1, |u| gibbs.marginal_y(u), y, &rule),
            )
        })
        .collect();
    Ok(xs
        .iter()
        .flat_map(|&(rx, vx)| ys.iter().map(move |&(yy, ry)| -gamma * rx * yy - vx * ry))
        .collect())
}
