use std::collections::BTreeMap;

use super::{CellResult, EstimatorSpec, ExperimentConfig, Resolved, StabilizerRule};
use crate::binning::{finish_velocity, smooth_position, OccupationBins};
use crate::density::{
    mesh_slack, probe_time_averages, supnorm_risk, DensityAccumulator, EstimationConfig, ProbeConfig,
};
use crate::drift::{
    default_rho_star, nw_drift, select_from_table, smoothed_drift_target, thresholds, AdaptiveConstants,
    CandidateTable, DriftAccumulator, Stabilizer,
};
use crate::error::{invalid, Error, Result};
use crate::grid::Scaled;
use crate::kernels::{BandwidthGrid, ConvolutionConfig};
use crate::model::{stationary_start, stream_em, GibbsDensity, ModelSpec, PositionUpdate, StartRule};
use crate::rates::{bandwidth_from_smoothness, truncation_r_t, RegimeKey, SmoothnessParams, Target};
use crate::rng::cell_seed;

/// Mixed into the seed root of calibration runs so they never share paths
/// with evaluation cells.
pub const CALIBRATION_SALT: u64 = 0xCA11_B4A7_E5EE_D000;

/// Bandwidth pair that fixes `dt` for a cell at horizon `t` (the smallest
/// candidate for adaptive runs, the smallest scale for variance probes).
pub fn cell_bandwidths(
    config: &ExperimentConfig,
    model: &ModelSpec,
    params: &SmoothnessParams,
    key: &RegimeKey,
    t: f64,
) -> Result<(f64, f64)> {
    match &config.estimator {
        EstimatorSpec::Density => bandwidth_from_smoothness(t, params, key, Target::Density),
        EstimatorSpec::DriftFixed { .. } => bandwidth_from_smoothness(t, params, key, Target::Drift),
        EstimatorSpec::DriftAdaptive { grid_base, .. } => {
            let h = BandwidthGrid::candidate(t, model.d, *grid_base)?.smallest_bandwidth();
            Ok((h, h))
        }
        EstimatorSpec::Varprobe { scales, .. } => {
            Ok(scales.iter().fold((f64::INFINITY, f64::INFINITY), |(a, b), &(s1, s2)| {
                (a.min(s1), b.min(s2))
            }))
        }
    }
}

/// `(dt, n)` with `n · dt = t`.
pub fn cell_step(config: &ExperimentConfig, h_min: f64, t: f64) -> Result<(f64, usize)> {
    let rule = &config.dt_rule;
    if let Some(dt) = rule.fixed {
        let n = (t / dt).round();
        if !(dt > 0.0) || n < 1.0 || ((n * dt - t) / t).abs() > 1e-9 {
            return Err(invalid("dt_rule", format!("fixed dt {dt} does not divide T = {t}")));
        }
        return Ok((dt, n as usize));
    }
    let target = rule.max.min(rule.factor * h_min * h_min);
    if !(target > 0.0) {
        return Err(invalid("dt_rule", "step must be positive"));
    }
    let n = (t / target - 1e-9).ceil().max(1.0);
    Ok((t / n, n as usize))
}

fn start_state(model: &ModelSpec, dt: f64, seed: u64) -> Result<Vec<f64>> {
    let rule = if model.gibbs_parameters().is_some() {
        StartRule::Gibbs
    } else {
        StartRule::Burn {
            anchor: vec![0.0; 2 * model.d],
        }
    };
    stationary_start(model, model.default_burn_in(), dt, seed, &rule)
}

fn gibbs_oracle(model: &ModelSpec) -> Result<GibbsDensity> {
    GibbsDensity::new(model).map_err(|_| Error::MissingOracle(model.id.clone()))
}

fn sup_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (u, v)| m.max((u - v).abs()))
}

pub(crate) fn run_cell(
    config: &ExperimentConfig,
    r: &Resolved,
    t: f64,
    rep: usize,
    lambda: Option<f64>,
) -> Result<Vec<CellResult>> {
    let seed = cell_seed(config.seed_root, t, rep as u64);
    let d = r.model.d;
    let (h1, h2) = cell_bandwidths(config, &r.model, &r.params, &r.key, t)?;
    let (dt, n) = cell_step(config, h1.min(h2), t)?;
    let mut extra = BTreeMap::new();
    extra.insert("dt".to_string(), dt);
    let row = |h1: f64, h2: f64, value: f64, extra: BTreeMap<String, f64>| CellResult {
        t,
        rep,
        h1,
        h2,
        value,
        extra,
    };
    match &config.estimator {
        EstimatorSpec::Density => {
            let gibbs = gibbs_oracle(&r.model)?;
            EstimationConfig::default().check(dt, h1, h2, &r.grid)?;
            let z0 = start_state(&r.model, dt, seed)?;
            let mut acc = DensityAccumulator::new(&r.kernel, h1, h2, &r.grid)?;
            stream_em(&r.model, &z0, n, dt, seed, PositionUpdate::Euler, |x, y, _| {
                acc.push(x, y)
            })?;
            let est = acc.finish(t)?;
            let truth = |p: &[f64]| gibbs.density(&p[..d], &p[d..]);
            extra.insert("mesh_slack".into(), mesh_slack(&r.grid, &est.values, truth));
            Ok(vec![row(h1, h2, supnorm_risk(&r.grid, &est.values, truth), extra)])
        }
        EstimatorSpec::DriftFixed { j, stabilizer } => {
            let j = *j;
            if j == 0 || j > d {
                return Err(invalid("j", format!("component index must lie in 1..={d}")));
            }
            EstimationConfig::default().check(dt, h1, h2, &r.grid)?;
            let z0 = start_state(&r.model, dt, seed)?;
            let mut acc = DriftAccumulator::new(&r.kernel, h1, h2, &r.grid)?;
            stream_em(&r.model, &z0, n, dt, seed, PositionUpdate::Euler, |x, y, dy| {
                acc.push(x, y, dy)
            })?;
            let (rho, nums) = acc.finish(t)?;
            let stab = match stabilizer {
                StabilizerRule::RhoStarPilot => Stabilizer::RhoStar(default_rho_star(&rho)),
                StabilizerRule::RhoStar(v) => Stabilizer::RhoStar(*v),
                StabilizerRule::RT => Stabilizer::RT(truncation_r_t(t, &r.params, d)?),
            };
            let b_hat = nw_drift(&nums[j - 1], &rho, stab)?;
            let truth: Vec<f64> = r
                .grid
                .points()
                .map(|p| r.model.drift(&p[..d], &p[d..])[j - 1])
                .collect();
            extra.insert("stabilizer".into(), stab.value());
            if let Ok(g) = GibbsDensity::new(&r.model) {
                let weighted = r
                    .grid
                    .points()
                    .enumerate()
                    .map(|(i, p)| ((b_hat[i] - truth[i]) * g.density(&p[..d], &p[d..])).abs())
                    .fold(0.0, f64::max);
                extra.insert("weighted_risk".into(), weighted);
            }
            Ok(vec![row(h1, h2, sup_err(&b_hat, &truth), extra)])
        }
        EstimatorSpec::DriftAdaptive { j, q, .. } => {
            let lambda = lambda.ok_or_else(|| invalid("lambda", "adaptive cell without calibrated constants"))?;
            let gibbs = gibbs_oracle(&r.model)?;
            let pass = adaptive_pass(config, r, t, seed)?;
            let constants = pass.constants(&r.model, *j, lambda, r)?;
            let sel = select_from_table(&pass.table, t, *j, *q, d, &constants)?;
            let truth: Vec<f64> = r
                .grid
                .points()
                .map(|p| r.model.drift(&p[..d], &p[d..])[*j - 1] * gibbs.density(&p[..d], &p[d..]))
                .collect();
            let risks: Vec<f64> = pass.table.singles.iter().map(|b| sup_err(b, &truth)).collect();
            let chosen = pass.table.position(sel.chosen).expect("chosen pair is a candidate");
            let (oracle, oracle_risk) =
                risks
                    .iter()
                    .enumerate()
                    .fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
            extra.insert("oracle_risk".into(), oracle_risk);
            extra.insert("ratio".into(), risks[chosen] / oracle_risk);
            extra.insert("oracle_h1".into(), pass.table.pairs[oracle].0);
            extra.insert("oracle_h2".into(), pass.table.pairs[oracle].1);
            extra.insert("rho_sup".into(), constants.rho_sup);
            extra.insert("lambda".into(), lambda);
            Ok(vec![row(sel.chosen.0, sel.chosen.1, risks[chosen], extra)])
        }
        EstimatorSpec::Varprobe { center, scales, .. } => {
            let cfg = ProbeConfig {
                t,
                dt,
                reps: config.replications,
                seed: config.seed_root,
            };
            let values = probe_time_averages(&r.model, center, scales, &cfg, &r.kernel.k1, rep as u64)?;
            Ok(scales
                .iter()
                .zip(values)
                .map(|(&(s1, s2), v)| row(s1, s2, v, extra.clone()))
                .collect())
        }
    }
}

/// One path binned with weights `(1, ΔY^j)` and the resulting candidate table.
struct AdaptivePass {
    table: CandidateTable,
    rho_hat: Vec<f64>,
}

impl AdaptivePass {
    fn constants(&self, model: &ModelSpec, j: usize, lambda: f64, r: &Resolved) -> Result<AdaptiveConstants> {
        let a_jj = model
            .a_jj_sup(j - 1)
            .ok_or_else(|| invalid("a_jj_sup", "diffusion has no bounded a_jj"))?;
        Ok(AdaptiveConstants {
            rho_sup: 1.1 * self.rho_hat.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            a_jj_sup: a_jj,
            c1_tilde: lambda,
            c2_tilde: lambda,
            k_sup: r.kernel.sup_norm(),
            k_l2: r.kernel.l2_norm(),
        })
    }
}

fn on_lattice(v: f64, step: f64) -> bool {
    let k = v / step;
    (k - k.round()).abs() < 1e-9
}

fn adaptive_pass(config: &ExperimentConfig, r: &Resolved, t: f64, seed: u64) -> Result<AdaptivePass> {
    let EstimatorSpec::DriftAdaptive {
        j,
        grid_base,
        density_bandwidth,
        bin_width,
        ..
    } = &config.estimator
    else {
        unreachable!("adaptive pass on a non-adaptive config")
    };
    let d = r.model.d;
    if *j == 0 || *j > d {
        return Err(invalid("j", format!("component index must lie in 1..={d}")));
    }
    let cands = BandwidthGrid::candidate(t, d, *grid_base)?;
    let h_min = cands.smallest_bandwidth();
    let (dt, n) = cell_step(config, h_min, t)?;
    EstimationConfig::default().check(dt, h_min, h_min, &r.grid)?;
    let h_rho = density_bandwidth.unwrap_or_else(|| {
        let (a, b) = bandwidth_from_smoothness(t, &r.params, &r.key, Target::Density).unwrap_or((0.25, 0.25));
        let h = a.min(b);
        grid_base.powf(-(h.recip().ln() / grid_base.ln()).round())
    });
    let spacing_ok = r
        .grid
        .axes
        .iter()
        .all(|a| a.count < 2 || on_lattice(a.spacing, *bin_width));
    let halves_ok = cands
        .pairs()
        .iter()
        .chain(std::iter::once(&(h_rho, h_rho)))
        .all(|&(a, b)| on_lattice(0.5 * a, *bin_width) && on_lattice(0.5 * b, *bin_width));
    if !spacing_ok || !halves_ok {
        return Err(invalid(
            "bin_width",
            "evaluation spacing and half-bandwidths must be multiples of the bin width",
        ));
    }
    let reach = cands.pairs().iter().fold(0.0f64, |m, &(a, b)| m.max(a).max(b));
    let mut bins = OccupationBins::new(&r.grid, &vec![reach; 2 * d], *bin_width, 2)?;
    let z0 = start_state(&r.model, dt, seed)?;
    let mut w = [1.0, 0.0];
    let jj = *j - 1;
    stream_em(&r.model, &z0, n, dt, seed, PositionUpdate::Euler, |x, y, dy| {
        w[1] = dy[jj];
        bins.push(x, y, &w);
    })?;
    let table = CandidateTable::binned(&bins, 1, t, &r.kernel, &cands, &r.grid, ConvolutionConfig::default())?;
    let partial = smooth_position(&bins, 0, &r.grid, &Scaled::new(&r.kernel.k1, h_rho));
    let rho_hat: Vec<f64> = finish_velocity(&partial, &bins, &r.grid, &Scaled::new(&r.kernel.k2, h_rho))
        .into_iter()
        .map(|v| v / n as f64)
        .collect();
    Ok(AdaptivePass { table, rho_hat })
}

/// Smallest `λ = C̃₁ = C̃₂` for which the majorant event
/// `‖b̄_η − E b̄_η‖ ≤ A_t(η)` holds for every candidate `η` on one path.
pub(crate) fn calibration_statistic(config: &ExperimentConfig, r: &Resolved, t: f64, run: usize) -> Result<f64> {
    let EstimatorSpec::DriftAdaptive { j, q, .. } = &config.estimator else {
        unreachable!("calibration on a non-adaptive config")
    };
    if *j != 1 || r.model.d != 1 {
        return Err(invalid(
            "estimator",
            "threshold calibration is implemented for d = 1, j = 1",
        ));
    }
    let seed = cell_seed(config.seed_root ^ CALIBRATION_SALT, t, run as u64);
    let pass = adaptive_pass(config, r, t, seed)?;
    let unit = pass.constants(&r.model, *j, 1.0, r)?;
    let a = thresholds(&pass.table, t, *q, 1, &unit)?;
    let mut worst: f64 = 0.0;
    for ((eta, single), a_k) in pass.table.pairs.iter().zip(&pass.table.singles).zip(&a) {
        let target = smoothed_drift_target(&r.model, &r.kernel, *eta, &r.grid)?;
        worst = worst.max(sup_err(single, &target) / a_k);
    }
    Ok(worst)
}
