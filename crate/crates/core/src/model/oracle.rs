use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;

use super::{ModelSpec, Potential};
use crate::error::{invalid, Error, Result};
use crate::quad::GaussLegendre;

/// Exact transition density of the free model `dX = Y dt`, `dY = σ₀ dW`.
///
/// Per axis the law of `(X_t, Y_t)` given `(x₀, y₀)` is Gaussian with mean
/// `(x₀ + y₀ t, y₀)` and covariance `σ₀² [[t³/3, t²/2], [t²/2, t]]`.
pub fn free_transition_density(z0: &[f64], z: &[f64], t: f64, sigma0: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(invalid("t", "must be positive"));
    }
    if !(sigma0 > 0.0) {
        return Err(invalid("sigma0", "must be positive"));
    }
    if z0.len() != z.len() || z.len() % 2 != 0 || z.is_empty() {
        return Err(invalid("z", "points must be 2d-vectors of equal length"));
    }
    let d = z.len() / 2;
    let s2 = sigma0 * sigma0;
    let norm = 3f64.sqrt() / (PI * s2 * t * t);
    let mut log_p = 0.0;
    for i in 0..d {
        let e = envelope_quadratic(t, z0[i], z0[d + i], z[i], z[d + i]);
        log_p += norm.ln() - 2.0 * e / s2;
    }
    Ok(log_p.exp())
}

/// `‖y₁ − y₂‖²/(4t) + 3‖x₂ − x₁ − t(y₁ + y₂)/2‖²/t³` for one axis.
#[inline]
fn envelope_quadratic(t: f64, x1: f64, y1: f64, x2: f64, y2: f64) -> f64 {
    let v = y2 - y1;
    let u = x2 - x1 - 0.5 * t * (y1 + y2);
    v * v / (4.0 * t) + 3.0 * u * u / (t * t * t)
}

/// `c_G t^{-2d} exp(−E/c_G)` with the envelope quadratic `E`.
pub fn gaussian_envelope(c_g: f64, t: f64, z1: &[f64], z2: &[f64]) -> f64 {
    let d = z1.len() / 2;
    let e: f64 = (0..d)
        .map(|i| envelope_quadratic(t, z1[i], z1[d + i], z2[i], z2[d + i]))
        .sum();
    (c_g.ln() - 2.0 * d as f64 * t.ln() - e / c_g).exp()
}

/// Smallest `c_G` for which the envelope dominates the free density at every
/// `(t, z0, z)` in `sweep`. Found by bisection; the envelope is increasing in `c_G`.
pub fn fit_envelope_constant(sigma0: f64, sweep: &[(f64, Vec<f64>, Vec<f64>)]) -> Result<f64> {
    if sweep.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let dominated = |c: f64| -> Result<bool> {
        for (t, z0, z) in sweep {
            let p = free_transition_density(z0, z, *t, sigma0)?;
            if p > gaussian_envelope(c, *t, z0, z) * (1.0 + 1e-12) {
                return Ok(false);
            }
        }
        Ok(true)
    };
    let (mut lo, mut hi) = (1e-6, 1.0);
    while !dominated(hi)? {
        hi *= 2.0;
        if hi > 1e12 {
            return Err(Error::NotNormalizable("envelope fit diverged".into()));
        }
    }
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if dominated(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Closed-form invariant density of kinetic Langevin with `c = γI`, `σ = σ₀I`:
/// `ρ ∝ exp(−(V(x) + ‖y‖²/2)/θ)`, `θ = σ₀²/(2γ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GibbsDensity {
    pub d: usize,
    pub potential: Potential,
    theta: f64,
    v_min: f64,
    half_width: f64,
    log_zx: f64,
}

impl GibbsDensity {
    pub fn new(model: &ModelSpec) -> Result<Self> {
        let (gamma, sigma0) = model
            .gibbs_parameters()
            .ok_or_else(|| Error::NotNormalizable(format!("model `{}` has no Gibbs product form", model.id)))?;
        Self::from_parts(gamma, sigma0, model.potential.clone(), model.d)
    }

    pub fn from_parts(gamma: f64, sigma0: f64, potential: Potential, d: usize) -> Result<Self> {
        if !(gamma > 0.0) || !(sigma0 > 0.0) {
            return Err(invalid("gamma/sigma0", "must be positive"));
        }
        if !potential.is_confining() {
            return Err(Error::NotNormalizable(format!("{potential:?} is not confining")));
        }
        let theta = sigma0 * sigma0 / (2.0 * gamma);
        let mut half_width: f64 = 1.0;
        while (potential.value_1d(half_width).min(potential.value_1d(-half_width))) / theta < 60.0 {
            half_width *= 1.25;
            if half_width > 1e6 {
                return Err(Error::NotNormalizable("potential grows too slowly".into()));
            }
        }
        let gl = GaussLegendre::new(24);
        let panels = 256;
        let v_min = (0..=4096)
            .map(|k| potential.value_1d(-half_width + k as f64 * 2.0 * half_width / 4096.0))
            .fold(f64::INFINITY, f64::min);
        let zx = gl.integrate_composite(-half_width, half_width, panels, |s| {
            (-(potential.value_1d(s) - v_min) / theta).exp()
        });
        Ok(Self {
            d,
            potential,
            theta,
            v_min,
            half_width,
            log_zx: zx.ln(),
        })
    }

    /// Temperature `σ₀²/(2γ)`; also the velocity variance.
    pub fn theta(&self) -> f64 {
        self.theta
    }

    /// Interval outside which the position marginal is below `e^{-60}` relative.
    pub fn x_support(&self) -> (f64, f64) {
        (-self.half_width, self.half_width)
    }

    #[inline]
    pub fn marginal_x(&self, s: f64) -> f64 {
        (-(self.potential.value_1d(s) - self.v_min) / self.theta - self.log_zx).exp()
    }

    #[inline]
    pub fn marginal_y(&self, s: f64) -> f64 {
        (-0.5 * s * s / self.theta).exp() / (2.0 * PI * self.theta).sqrt()
    }

    pub fn density(&self, x: &[f64], y: &[f64]) -> f64 {
        x.iter().map(|&s| self.marginal_x(s)).product::<f64>() * y.iter().map(|&s| self.marginal_y(s)).product::<f64>()
    }

    pub fn sup_norm(&self) -> f64 {
        let mx = (-self.log_zx).exp();
        (mx * self.marginal_y(0.0)).powi(self.d as i32)
    }

    /// One exact draw: Gaussian velocity, rejection-sampled position.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
        let x = (0..self.d)
            .map(|_| loop {
                let s = rng.random_range(-self.half_width..self.half_width);
                let accept = (-(self.potential.value_1d(s) - self.v_min) / self.theta).exp();
                if rng.random::<f64>() < accept {
                    break s;
                }
            })
            .collect();
        let sd = self.theta.sqrt();
        let y = (0..self.d).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect();
        (x, y)
    }
}

/// `Z⁻¹ exp(−(2γ/σ₀²)(V(x) + ‖y‖²/2))`.
pub fn gibbs_invariant_density(gamma: f64, sigma0: f64, potential: &Potential, x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(invalid("x/y", "dimension mismatch"));
    }
    Ok(GibbsDensity::from_parts(gamma, sigma0, potential.clone(), x.len())?.density(x, y))
}

/// Weak stationarity defect `max_f |∫ ρ L f|` for `d = 1` over Gaussian
/// bumps `f` of width `width` centred at `centers`, with generator
/// `L f = y ∂ₓf + b ∂ᵧf + (a/2) ∂ᵧ²f`.
pub fn fokker_planck_residual<F>(model: &ModelSpec, rho: F, centers: &[(f64, f64)], width: f64) -> Result<f64>
where
    F: Fn(f64, f64) -> f64,
{
    if model.d != 1 {
        return Err(invalid("d", "residual check is implemented for d = 1"));
    }
    if !(width > 0.0) {
        return Err(invalid("width", "must be positive"));
    }
    let a = model.a_jj_sup(0).unwrap_or(0.0);
    let gl = GaussLegendre::new(20);
    let reach = 9.0 * width;
    let panels = 24;
    let mut worst: f64 = 0.0;
    for &(cx, cy) in centers {
        let inner = |x: f64| {
            gl.integrate_composite(cy - reach, cy + reach, panels, |y| {
                let (u, v) = ((x - cx) / width, (y - cy) / width);
                let f = (-0.5 * (u * u + v * v)).exp();
                let fx = -u / width * f;
                let fy = -v / width * f;
                let fyy = (v * v - 1.0) / (width * width) * f;
                let b = model.drift(&[x], &[y])[0];
                rho(x, y) * (y * fx + b * fy + 0.5 * a * fyy)
            })
        };
        let r = gl.integrate_composite(cx - reach, cx + reach, panels, inner);
        worst = worst.max(r.abs());
    }
    Ok(worst)
}

/// Sample autocorrelation at lags `0..=max_lag`.
pub fn autocorrelation(series: &[f64], max_lag: usize) -> Vec<f64> {
    let n = series.len();
    if n < 2 {
        return vec![1.0];
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let var = series.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    (0..=max_lag.min(n - 1))
        .map(|lag| {
            let c: f64 = (0..n - lag)
                .map(|k| (series[k] - mean) * (series[k + lag] - mean))
                .sum();
            if var > 0.0 {
                c / var
            } else {
                0.0
            }
        })
        .collect()
}

/// First lag after which `|acf|` stays below `threshold`.
pub fn decorrelation_lag(acf: &[f64], threshold: f64) -> Option<usize> {
    let last_above = acf.iter().rposition(|v| v.abs() >= threshold)?;
    (last_above + 1 < acf.len()).then_some(last_above + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{simulate_em, simulate_free_exact};
    use crate::rng::axis_rng;

    #[test]
    fn free_density_at_origin() {
        let p = free_transition_density(&[0.0, 0.0], &[0.0, 0.0], 1.0, 1.0).unwrap();
        let expected = (1.0 / 12.0f64).powf(-0.5) / (2.0 * PI);
        assert!((p - expected).abs() < 1e-14);
    }

    #[test]
    fn free_density_symmetry_and_errors() {
        let p1 = free_transition_density(&[0.0, 0.0], &[0.3, -0.7], 0.8, 1.3).unwrap();
        let p2 = free_transition_density(&[0.0, 0.0], &[-0.3, 0.7], 0.8, 1.3).unwrap();
        assert!((p1 - p2).abs() < 1e-15 * p1.max(1.0));
        assert!(free_transition_density(&[0.0, 0.0], &[0.0, 0.0], 0.0, 1.0).is_err());
        assert!(free_transition_density(&[0.0, 0.0], &[0.0, 0.0], 1.0, -1.0).is_err());
    }

    #[test]
    fn free_density_integrates_to_one() {
        let gl = GaussLegendre::new(40);
        let (t, z0) = (0.7, [0.2, -0.4]);
        let mx = z0[0] + z0[1] * t;
        let total = gl.integrate_composite(mx - 3.0, mx + 3.0, 16, |x| {
            gl.integrate_composite(z0[1] - 7.0, z0[1] + 7.0, 16, |y| {
                free_transition_density(&z0, &[x, y], t, 1.0).unwrap()
            })
        });
        assert!((total - 1.0).abs() < 1e-9, "{total}");
    }

    fn sweep(d: usize) -> Vec<(f64, Vec<f64>, Vec<f64>)> {
        let mut out = Vec::new();
        let mut rng = axis_rng(5, 0);
        for k in 1..=10 {
            let t = k as f64 / 10.0;
            for _ in 0..200 {
                let z0: Vec<f64> = (0..2 * d).map(|_| rng.random_range(0.0..1.0)).collect();
                let z: Vec<f64> = (0..2 * d).map(|_| rng.random_range(0.0..1.0)).collect();
                out.push((t, z0, z));
            }
            let rest: Vec<f64> = (0..2 * d).map(|i| if i < d { 0.5 } else { 0.0 }).collect();
            out.push((t, rest.clone(), rest));
        }
        out
    }

    #[test]
    fn envelope_dominates_with_fitted_constant() {
        for (d, sigma0) in [(1, 1.0), (1, 0.6), (2, 1.0)] {
            let s = sweep(d);
            let c = fit_envelope_constant(sigma0, &s).unwrap();
            let closed = (3f64.sqrt() / (PI * sigma0 * sigma0))
                .powi(d as i32)
                .max(sigma0 * sigma0 / 2.0);
            assert!(c <= closed * (1.0 + 1e-9), "d {d}: fitted {c} > {closed}");
            for (t, z0, z) in &s {
                let p = free_transition_density(z0, z, *t, sigma0).unwrap();
                assert!(p <= gaussian_envelope(closed, *t, z0, z) * (1.0 + 1e-12));
            }
        }
        let c = fit_envelope_constant(1.0, &sweep(1)).unwrap();
        assert!((c - 3f64.sqrt() / PI).abs() < 1e-6, "{c}");
    }

    #[test]
    fn exact_sampler_moments() {
        let tr = simulate_free_exact(&[0.0, 0.0], 1.0, 1.0, 1.0, 1).unwrap();
        assert_eq!(tr.n_steps, 1);
        let n = 100_000;
        let (mut sx, mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0, 0.0);
        let mut xs = Vec::with_capacity(n);
        for k in 0..n as u64 {
            let tr = simulate_free_exact(&[0.0, 0.0], 2.0, 0.5, 1.0, 1000 + k).unwrap();
            let (x, y) = (tr.x_at(4)[0], tr.y_at(4)[0]);
            sx += x;
            sxx += x * x;
            sxy += x * y;
            syy += y * y;
            xs.push(x * x);
        }
        let nf = n as f64;
        let var_x = sxx / nf - (sx / nf).powi(2);
        let m4 = xs.iter().map(|v| v * v).sum::<f64>() / nf;
        let se = ((m4 - (sxx / nf).powi(2)) / nf).sqrt();
        assert!((var_x - 8.0 / 3.0).abs() < 3.0 * se, "{var_x} ± {se}");
        assert!((sxy / nf - 2.0).abs() < 0.05);
        assert!((syy / nf - 2.0).abs() < 0.05);
    }

    #[test]
    fn euler_converges_weakly_to_exact() {
        let free = ModelSpec::free(1, 1.0).unwrap();
        let reps = 20_000;
        let mean_var = |dt: f64| {
            let mut s = 0.0;
            for r in 0..reps {
                let tr = simulate_em(&free, &[0.0, 0.0], 1.0, dt, 50 + r).unwrap();
                s += tr.x_at(tr.n_steps)[0].powi(2);
            }
            s / reps as f64
        };
        // Euler position update gives Var X_1 = dt² Σ_{k<n} k = (1 − dt)(1 − 2dt)/3 + O(dt) bias.
        let exact = 1.0 / 3.0;
        let (e1, e2) = (mean_var(0.1) - exact, mean_var(0.05) - exact);
        assert!(e1 < 0.0 && e2 < 0.0);
        assert!((e1 / e2 - 2.0).abs() < 0.6, "{e1} {e2}");
    }

    #[test]
    fn gibbs_gaussian_case() {
        let m = ModelSpec::langevin(1, 1.0, 1.0).unwrap();
        let g = GibbsDensity::new(&m).unwrap();
        assert!((g.theta() - 0.5).abs() < 1e-15);
        for &(x, y) in &[(0.0f64, 0.0f64), (0.4, -1.1), (1.3, 0.7)] {
            let expect = (-(x * x + y * y)).exp() / PI;
            assert!((g.density(&[x], &[y]) - expect).abs() < 1e-12);
        }
        assert!((g.sup_norm() - 1.0 / PI).abs() < 1e-12);
    }

    #[test]
    fn gibbs_normalized_and_stationary() {
        let gl = GaussLegendre::new(30);
        for m in [
            ModelSpec::langevin(1, 1.0, 1.0).unwrap(),
            ModelSpec::langevin(1, 0.7, 1.4).unwrap(),
            ModelSpec::double_well(1, 1.0, 1.0, 1.0).unwrap(),
        ] {
            let g = GibbsDensity::new(&m).unwrap();
            let (a, b) = g.x_support();
            let mass_x = gl.integrate_composite(a, b, 97, |s| g.marginal_x(s));
            let mass_y = gl.integrate_composite(-12.0, 12.0, 41, |s| g.marginal_y(s));
            assert!((mass_x * mass_y - 1.0).abs() < 1e-8);
            let centers = [(0.0, 0.0), (0.5, 0.3), (-0.8, 0.9), (1.0, -0.5)];
            let r = fokker_planck_residual(&m, |x, y| g.density(&[x], &[y]), &centers, 0.3).unwrap();
            assert!(r < 1e-6, "{}: {r}", m.id);
        }
    }

    #[test]
    fn residual_detects_wrong_density() {
        let m = ModelSpec::langevin(1, 1.0, 1.0).unwrap();
        let wrong = |x: f64, y: f64| f64::exp(-(x * x + 2.0 * y * y));
        let r = fokker_planck_residual(&m, wrong, &[(0.5, 0.3), (0.3, 0.5)], 0.3).unwrap();
        assert!(r > 1e-3, "{r}");
    }

    #[test]
    fn non_normalizable_rejected() {
        assert!(GibbsDensity::new(&ModelSpec::free(1, 1.0).unwrap()).is_err());
        assert!(gibbs_invariant_density(1.0, 1.0, &Potential::Zero, &[0.0], &[0.0]).is_err());
        let v = gibbs_invariant_density(1.0, 1.0, &Potential::Quadratic { stiffness: 1.0 }, &[0.0], &[0.0]).unwrap();
        assert!((v - 1.0 / PI).abs() < 1e-12);
    }

    #[test]
    fn gibbs_direct_sampling_moments() {
        let g = GibbsDensity::new(&ModelSpec::langevin(1, 1.0, 1.0).unwrap()).unwrap();
        let mut rng = axis_rng(17, 0);
        let n = 10_000;
        let draws: Vec<(f64, f64)> = (0..n)
            .map(|_| {
                let (x, y) = g.sample(&mut rng);
                (x[0], y[0])
            })
            .collect();
        let nf = n as f64;
        for pick in [0usize, 1] {
            let v: Vec<f64> = draws.iter().map(|p| if pick == 0 { p.0 } else { p.1 }).collect();
            let mean = v.iter().sum::<f64>() / nf;
            let m2 = v.iter().map(|s| s * s).sum::<f64>() / nf;
            // N(0, 1/2): sd of the mean is √(1/2)/√n; of the second moment √(2·(1/2)²)/√n.
            assert!(mean.abs() < 3.0 * (0.5 / nf).sqrt());
            assert!((m2 - 0.5).abs() < 3.0 * (0.5 / nf).sqrt());
        }
    }

    #[test]
    fn velocity_marginal_independent_of_potential() {
        let a = GibbsDensity::new(&ModelSpec::double_well(1, 2.0, 1.0, 3.0).unwrap()).unwrap();
        let b = GibbsDensity::new(&ModelSpec::langevin(1, 2.0, 1.0).unwrap()).unwrap();
        for s in [-1.0, 0.0, 0.3, 2.0] {
            assert_eq!(a.marginal_y(s), b.marginal_y(s));
        }
        assert!((a.theta() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn autocorrelation_basics() {
        let s: Vec<f64> = (0..1000).map(|k| if k % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let acf = autocorrelation(&s, 3);
        assert!((acf[0] - 1.0).abs() < 1e-12);
        assert!((acf[1] + 1.0).abs() < 1e-2);
        assert_eq!(decorrelation_lag(&[1.0, 0.5, 0.01, -0.02], 0.05), Some(2));
        assert_eq!(decorrelation_lag(&[1.0, 0.5, 0.2], 0.05), None);
    }

    #[test]
    fn mixing_proxy_monotone_in_damping() {
        let mut lags = Vec::new();
        for gamma in [0.25, 0.5, 1.0] {
            let m = ModelSpec::langevin(1, gamma, 1.0).unwrap();
            let tr = simulate_em(&m, &[0.0, 0.0], 100_000.0, 0.05, 3).unwrap();
            let obs: Vec<f64> = (0..=tr.n_steps).step_by(4).map(|k| tr.x_at(k)[0].tanh()).collect();
            let acf = autocorrelation(&obs, 400);
            lags.push(decorrelation_lag(&acf, 0.05).expect("decorrelates within the window"));
        }
        assert!(lags[0] > lags[1] && lags[1] > lags[2], "{lags:?}");
    }
}
