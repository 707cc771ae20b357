use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{write_atomic, CellResult, EstimatorSpec, ExperimentConfig, Resolved};
use crate::density::probe_bounds;
use crate::error::{invalid, Error, Result};
use crate::rates::{classical_exponent, psi_exponent};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    /// Against `log(T / log T)`.
    pub slope: f64,
    pub stderr: f64,
    /// Against `log T`, for reference.
    pub slope_log_t: f64,
    pub stderr_log_t: f64,
}

/// Ordinary least squares slope and its standard error.
pub fn fit_slope(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() {
        return Err(invalid("y", "length differs from x"));
    }
    let n = x.len();
    if n < 3 {
        return Err(invalid("x", format!("need at least 3 points, got {n}")));
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if !(sxx > 1e-300 * (1.0 + mx * mx)) {
        return Err(Error::DegenerateRegressor);
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let ssr: f64 = x.iter().zip(y).map(|(a, b)| (b - my - slope * (a - mx)).powi(2)).sum();
    Ok((slope, (ssr / (nf - 2.0) / sxx).sqrt()))
}

/// Replication statistics of one `(T, h₁, h₂)` group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    #[serde(rename = "T")]
    pub t: f64,
    pub h1: f64,
    pub h2: f64,
    pub n: usize,
    pub mean: f64,
    pub se: f64,
    pub variance: f64,
}

/// Groups by `(T, h₁, h₂)`, or by `T` alone when `by_bandwidth` is false.
pub fn aggregate(rows: &[CellResult], by_bandwidth: bool) -> Vec<Aggregate> {
    let mut keys: Vec<(f64, f64, f64)> = rows
        .iter()
        .map(|c| {
            if by_bandwidth {
                (c.t, c.h1, c.h2)
            } else {
                (c.t, f64::NAN, f64::NAN)
            }
        })
        .collect();
    keys.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    keys.dedup_by(|a, b| {
        a.0 == b.0 && (a.1 == b.1 || (a.1.is_nan() && b.1.is_nan())) && (a.2 == b.2 || (a.2.is_nan() && b.2.is_nan()))
    });
    keys.into_iter()
        .map(|(t, h1, h2)| {
            let vals: Vec<f64> = rows
                .iter()
                .filter(|c| c.t == t && (!by_bandwidth || (c.h1 == h1 && c.h2 == h2)))
                .map(|c| c.value)
                .collect();
            let n = vals.len();
            let nf = n as f64;
            let mean = vals.iter().sum::<f64>() / nf;
            let variance = if n > 1 {
                vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0)
            } else {
                0.0
            };
            Aggregate {
                t,
                h1: if by_bandwidth { h1 } else { 0.0 },
                h2: if by_bandwidth { h2 } else { 0.0 },
                n,
                mean,
                se: (variance / nf).sqrt(),
                variance,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub target: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub name: String,
    pub estimator: String,
    pub replications: usize,
    /// Theoretical exponent from the rate calculus (variance-bound slope for probes).
    pub exponent: Option<f64>,
    /// Slope of the guide line drawn in the plot.
    pub guide_slope: Option<f64>,
    pub fit: Option<SlopeFit>,
    /// Calibrated `C̃₁ = C̃₂` and the per-run statistics behind it.
    pub lambda: Option<f64>,
    pub calibration: Vec<f64>,
    pub aggregates: Vec<Aggregate>,
    pub verdicts: Vec<Verdict>,
    pub cells: Vec<CellResult>,
}

impl RiskReport {
    pub fn passed(&self) -> bool {
        self.verdicts.iter().all(|v| v.passed)
    }
}

/// `⌈0.95 n⌉`-th smallest calibration statistic.
pub(crate) fn calibrated_lambda(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(invalid("calibration_runs", "need at least one calibration run"));
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let k = ((0.95 * v.len() as f64).ceil() as usize).clamp(1, v.len());
    Ok(v[k - 1])
}

fn regressor(t: f64) -> f64 {
    (t / t.ln()).ln()
}

pub(crate) fn build_report(
    config: &ExperimentConfig,
    r: &Resolved,
    cells: Vec<CellResult>,
    lambda: Option<f64>,
    calibration: &[f64],
) -> Result<RiskReport> {
    let mut verdicts = Vec::new();
    let mut fit = None;
    let (exponent, guide_slope, aggregates) = match &config.estimator {
        EstimatorSpec::Density | EstimatorSpec::DriftFixed { .. } => {
            let exponent = match config.estimator {
                EstimatorSpec::Density => psi_exponent(&r.key)?,
                _ => classical_exponent(&r.params, r.model.d),
            };
            let aggs = aggregate(&cells, false);
            if aggs.len() >= 3 && aggs.iter().all(|a| a.mean > 0.0) {
                let y: Vec<f64> = aggs.iter().map(|a| a.mean.ln()).collect();
                let x: Vec<f64> = aggs.iter().map(|a| regressor(a.t)).collect();
                let lt: Vec<f64> = aggs.iter().map(|a| a.t.ln()).collect();
                let (slope, stderr) = fit_slope(&x, &y)?;
                let (slope_log_t, stderr_log_t) = fit_slope(&lt, &y)?;
                fit = Some(SlopeFit {
                    slope,
                    stderr,
                    slope_log_t,
                    stderr_log_t,
                });
                if aggs.len() >= 4 {
                    verdicts.push(Verdict {
                        name: "rate slope".into(),
                        passed: (slope + exponent).abs() <= config.slope_tolerance,
                        value: -slope,
                        target: exponent,
                        detail: format!(
                            "fitted exponent {:.3} ± {:.3} vs {:.3} (tolerance {})",
                            -slope, stderr, exponent, config.slope_tolerance
                        ),
                    });
                }
            }
            (Some(exponent), Some(-exponent), aggs)
        }
        EstimatorSpec::DriftAdaptive {
            oracle_factor,
            oracle_fraction,
            ..
        } => {
            for &t in &config.t_ladder {
                let rows: Vec<&CellResult> = cells.iter().filter(|c| c.t == t).collect();
                let hits = rows
                    .iter()
                    .filter(|c| c.value <= oracle_factor * c.extra.get("oracle_risk").copied().unwrap_or(f64::NAN))
                    .count();
                let frac = hits as f64 / rows.len().max(1) as f64;
                verdicts.push(Verdict {
                    name: format!("oracle proximity T={t}"),
                    passed: frac >= *oracle_fraction,
                    value: frac,
                    target: *oracle_fraction,
                    detail: format!(
                        "{hits}/{} replications with risk <= {oracle_factor} x oracle risk",
                        rows.len()
                    ),
                });
            }
            (None, Some(1.0), aggregate(&cells, false))
        }
        EstimatorSpec::Varprobe {
            center,
            scales,
            min_slope,
        } => {
            let d = r.model.d;
            let aggs = aggregate(&cells, true);
            let mut exponent = None;
            for &t in &config.t_ladder {
                let bounds = probe_bounds(d, center, scales, t, &r.kernel.k1)?;
                let vars: Vec<f64> = scales
                    .iter()
                    .map(|&(s1, s2)| {
                        aggs.iter()
                            .find(|a| a.t == t && a.h1 == s1 && a.h2 == s2)
                            .map_or(f64::NAN, |a| a.variance)
                    })
                    .collect();
                let coarse = (0..scales.len())
                    .max_by(|&a, &b| {
                        (scales[a].0 * scales[a].1)
                            .partial_cmp(&(scales[b].0 * scales[b].1))
                            .unwrap()
                            .then(b.cmp(&a))
                    })
                    .unwrap();
                let c_hat = vars[coarse] / bounds[coarse];
                let worst = vars
                    .iter()
                    .zip(&bounds)
                    .map(|(v, b)| v / (c_hat * b))
                    .fold(f64::NEG_INFINITY, f64::max);
                verdicts.push(Verdict {
                    name: format!("bound compliance T={t}"),
                    passed: worst <= 1.0 + 1e-12,
                    value: worst,
                    target: 1.0,
                    detail: format!(
                        "max variance / (C x bound) = {worst:.4} with C = {c_hat:.4e} fitted at the coarsest scale"
                    ),
                });
                if scales.len() >= 3 {
                    let ls: Vec<f64> = scales.iter().map(|s| s.0.ln()).collect();
                    if let Ok((bound_slope, _)) = fit_slope(&ls, &bounds.iter().map(|b| b.ln()).collect::<Vec<_>>()) {
                        exponent.get_or_insert(bound_slope);
                    }
                    if let Some(m) = min_slope {
                        let (slope, se) = fit_slope(&ls, &vars.iter().map(|v| v.ln()).collect::<Vec<_>>())?;
                        verdicts.push(Verdict {
                            name: format!("s1 slope T={t}"),
                            passed: slope >= *m,
                            value: slope,
                            target: *m,
                            detail: format!("variance s1-slope {slope:.3} ± {se:.3}, required >= {m}"),
                        });
                    }
                }
            }
            (exponent, exponent, aggs)
        }
    };
    Ok(RiskReport {
        name: config.name.clone(),
        estimator: config.estimator.kind().into(),
        replications: config.replications,
        exponent,
        guide_slope,
        fit,
        lambda,
        calibration: calibration.to_vec(),
        aggregates,
        verdicts,
        cells,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    Svg,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            "svg" => Ok(Self::Svg),
            other => Err(invalid("format", format!("expected csv, json or svg, got {other}"))),
        }
    }
}

pub fn read_report(dir: &Path) -> Result<RiskReport> {
    Ok(serde_json::from_slice(&fs::read(dir.join("report.json"))?)?)
}

/// Writes `cells.csv`, `report.json` or `plot.svg` into `dir`.
pub fn emit_report(report: &RiskReport, format: ReportFormat, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let (name, bytes) = match format {
        ReportFormat::Csv => ("cells.csv", cells_csv(&report.cells).into_bytes()),
        ReportFormat::Json => ("report.json", serde_json::to_vec_pretty(report)?),
        ReportFormat::Svg => ("plot.svg", svg(report).into_bytes()),
    };
    let path = dir.join(name);
    write_atomic(&path, &bytes)?;
    Ok(path)
}

/// Parses a `cells.csv` written by [`emit_report`].
pub fn read_cells_csv(path: &Path) -> Result<Vec<CellResult>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{} is empty", path.display())))?
        .split(',')
        .collect();
    if header.len() < 5 || header[..5] != ["T", "rep", "h1", "h2", "value"] {
        return Err(Error::Format(format!("{}: unexpected header", path.display())));
    }
    let num = |s: &str| -> Result<f64> {
        s.parse()
            .map_err(|_| Error::Format(format!("{}: bad number {s:?}", path.display())))
    };
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != header.len() {
                return Err(Error::Format(format!("{}: ragged row", path.display())));
            }
            let mut extra = std::collections::BTreeMap::new();
            for (k, v) in header[5..].iter().zip(&f[5..]) {
                if !v.is_empty() {
                    extra.insert(k.to_string(), num(v)?);
                }
            }
            Ok(CellResult {
                t: num(f[0])?,
                rep: num(f[1])? as usize,
                h1: num(f[2])?,
                h2: num(f[3])?,
                value: num(f[4])?,
                extra,
            })
        })
        .collect()
}

fn cells_csv(cells: &[CellResult]) -> String {
    let keys: BTreeSet<&String> = cells.iter().flat_map(|c| c.extra.keys()).collect();
    let mut out = String::from("T,rep,h1,h2,value");
    for k in &keys {
        out.push(',');
        out.push_str(k);
    }
    out.push('\n');
    for c in cells {
        let _ = write!(out, "{},{},{},{},{}", c.t, c.rep, c.h1, c.h2, c.value);
        for k in &keys {
            out.push(',');
            if let Some(v) = c.extra.get(*k) {
                let _ = write!(out, "{v}");
            }
        }
        out.push('\n');
    }
    out
}

/// Points, axis labels and an optional fitted line for the plot.
fn plot_data(report: &RiskReport) -> (Vec<(f64, f64)>, &'static str, &'static str, Option<(f64, f64)>) {
    match report.estimator.as_str() {
        "drift-adaptive" => (
            report
                .cells
                .iter()
                .filter_map(|c| c.extra.get("oracle_risk").map(|o| (o.ln(), c.value.ln())))
                .collect(),
            "log oracle risk",
            "log selected risk",
            None,
        ),
        "varprobe" => {
            let t0 = report.aggregates.first().map_or(0.0, |a| a.t);
            (
                report
                    .aggregates
                    .iter()
                    .filter(|a| a.t == t0)
                    .map(|a| (a.h1.ln(), a.variance.ln()))
                    .collect(),
                "log s1",
                "log variance",
                None,
            )
        }
        _ => {
            let pts: Vec<(f64, f64)> = report
                .aggregates
                .iter()
                .map(|a| (regressor(a.t), a.mean.ln()))
                .collect();
            let line = report.fit.map(|f| {
                let n = pts.len() as f64;
                let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
                let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
                (f.slope, my - f.slope * mx)
            });
            (pts, "log(T / log T)", "log mean risk", line)
        }
    }
}

fn svg(report: &RiskReport) -> String {
    let (pts, xlabel, ylabel, fitted) = plot_data(report);
    let (w, h, m) = (640.0, 480.0, 60.0);
    let finite: Vec<(f64, f64)> = pts
        .iter()
        .copied()
        .filter(|p| p.0.is_finite() && p.1.is_finite())
        .collect();
    let (mut x0, mut x1, mut y0, mut y1) = finite.iter().fold(
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY),
        |(a, b, c, d), p| (a.min(p.0), b.max(p.0), c.min(p.1), d.max(p.1)),
    );
    if finite.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let pad = |lo: f64, hi: f64| {
        let s = (hi - lo).max(1e-9) * 0.08;
        (lo - s, hi + s)
    };
    let (x0, x1) = pad(x0, x1);
    let (y0, y1) = pad(y0, y1);
    let px = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let py = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let meta = serde_json::json!({
        "name": report.name,
        "estimator": report.estimator,
        "exponent": report.exponent,
        "guide_slope": report.guide_slope,
    });
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, "<metadata>{meta}</metadata>");
    let _ = writeln!(
        s,
        r#"<rect x="{m}" y="{m}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        w - 2.0 * m,
        h - 2.0 * m
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{xlabel}</text>"#,
        w / 2.0,
        h - 20.0
    );
    let _ = writeln!(
        s,
        r#"<text x="20" y="{}" transform="rotate(-90 20 {})" text-anchor="middle">{ylabel}</text>"#,
        h / 2.0,
        h / 2.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="30" text-anchor="middle">{}</text>"#,
        w / 2.0,
        report.name
    );
    let clip = |slope: f64, icpt: f64| {
        let (ya, yb) = (icpt + slope * x0, icpt + slope * x1);
        (px(x0), py(ya), px(x1), py(yb))
    };
    if let (Some(slope), Some(first)) = (report.guide_slope, finite.first()) {
        let icpt = match report.estimator.as_str() {
            "drift-adaptive" => 3f64.ln(),
            _ => first.1 - slope * first.0,
        };
        let (a, b, c, d) = clip(slope, icpt);
        let _ = writeln!(
            s,
            r#"<line class="guide" data-slope="{slope}" x1="{a:.2}" y1="{b:.2}" x2="{c:.2}" y2="{d:.2}" stroke="gray" stroke-dasharray="6 4"/>"#
        );
    }
    if let Some((slope, icpt)) = fitted {
        let (a, b, c, d) = clip(slope, icpt);
        let _ = writeln!(
            s,
            r#"<line class="fit" data-slope="{slope}" x1="{a:.2}" y1="{b:.2}" x2="{c:.2}" y2="{d:.2}" stroke="steelblue"/>"#
        );
    }
    for (x, y) in &finite {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="black"/>"#,
            px(*x),
            py(*y)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Guide-line slope recorded in an emitted plot.
pub fn svg_guide_slope(svg: &str) -> Option<f64> {
    let start = svg.find("<metadata>")? + "<metadata>".len();
    let end = svg[start..].find("</metadata>")? + start;
    let meta: serde_json::Value = serde_json::from_str(&svg[start..end]).ok()?;
    meta.get("guide_slope")?.as_f64()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::axis_rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn exact_power_law() {
        let x: Vec<f64> = (0..5).map(|i| i as f64 * 0.7 + 1.0).collect();
        let y: Vec<f64> = x.iter().map(|v| -0.4 * v).collect();
        let (s, se) = fit_slope(&x, &y).unwrap();
        assert!((s + 0.4).abs() < 1e-14);
        assert!(se < 1e-14);
        let mut y2 = y.clone();
        y2[2] += 1.0;
        assert!(fit_slope(&x, &y2).unwrap().1 > 0.0);
        assert!(matches!(
            fit_slope(&[1.0; 4], &[1.0, 2.0, 3.0, 4.0]),
            Err(Error::DegenerateRegressor)
        ));
        assert!(fit_slope(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn synthetic_rate_recovery() {
        let ladder = [1e3, 1e4, 1e5, 1e6];
        let mut rng = axis_rng(42, 0);
        let mut hits = 0;
        for _ in 0..200 {
            let x: Vec<f64> = ladder.iter().map(|&t| regressor(t)).collect();
            let y: Vec<f64> = ladder
                .iter()
                .map(|&t| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    (2.0 * (t.ln() / t).powf(0.4) * (1.0 + 0.05 * e)).ln()
                })
                .collect();
            let (s, _) = fit_slope(&x, &y).unwrap();
            if (-0.45..=-0.35).contains(&s) {
                hits += 1;
            }
        }
        assert!(hits >= 190, "{hits}");
    }

    #[test]
    fn calibration_quantile() {
        let v: Vec<f64> = (1..=40).map(|i| i as f64).collect();
        assert_eq!(calibrated_lambda(&v).unwrap(), 38.0);
        assert_eq!(calibrated_lambda(&[2.0]).unwrap(), 2.0);
        assert!(calibrated_lambda(&[]).is_err());
    }

    #[test]
    fn aggregation_groups() {
        let row = |t: f64, rep: usize, h: f64, v: f64| CellResult {
            t,
            rep,
            h1: h,
            h2: h,
            value: v,
            extra: Default::default(),
        };
        let rows = vec![
            row(10.0, 0, 0.5, 1.0),
            row(10.0, 1, 0.5, 3.0),
            row(10.0, 0, 0.25, 2.0),
            row(20.0, 0, 0.5, 4.0),
        ];
        let by_t = aggregate(&rows, false);
        assert_eq!(by_t.len(), 2);
        assert_eq!(by_t[0].n, 3);
        assert!((by_t[0].mean - 2.0).abs() < 1e-12);
        let by_h = aggregate(&rows, true);
        assert_eq!(by_h.len(), 3);
        let g = by_h.iter().find(|a| a.t == 10.0 && a.h1 == 0.5).unwrap();
        assert!((g.variance - 2.0).abs() < 1e-12);
        assert!(cells_csv(&rows).lines().count() == 5);
    }
}
