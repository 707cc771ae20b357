use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{GibbsDensity, ModelSpec};
use crate::error::{invalid, Error, Result};
use crate::rng::{axis_rng, splitmix64};
use crate::trajectory::Trajectory;

/// How the degenerate position equation is advanced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionUpdate {
    /// `X_{k+1} = X_k + Y_k dt`
    #[default]
    Euler,
    /// `X_{k+1} = X_k + (Y_k + Y_{k+1}) dt / 2`
    Trapezoidal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt_max: f64,
    pub position: PositionUpdate,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt_max: 0.1,
            position: PositionUpdate::Euler,
        }
    }
}

fn step_count(t: f64, dt: f64, config: &SimConfig) -> Result<usize> {
    if !(dt > 0.0 && dt <= config.dt_max) {
        return Err(invalid("dt", format!("need 0 < dt <= {}, got {dt}", config.dt_max)));
    }
    if !(t >= 0.0 && t.is_finite()) {
        return Err(invalid("T", format!("horizon must be finite and >= 0, got {t}")));
    }
    let n = (t / dt).round();
    if (n * dt - t).abs() > 1e-9 * t.max(1.0) {
        return Err(invalid("T", format!("T = {t} is not an integer multiple of dt = {dt}")));
    }
    Ok(n as usize)
}

fn split_state(model: &ModelSpec, z0: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if z0.len() != 2 * model.d {
        return Err(invalid(
            "z0",
            format!("expected {} coordinates, got {}", 2 * model.d, z0.len()),
        ));
    }
    Ok((z0[..model.d].to_vec(), z0[model.d..].to_vec()))
}

/// Euler-Maruyama integrator state; one ChaCha stream per noise axis.
pub struct EulerStepper<'a> {
    model: &'a ModelSpec,
    dt: f64,
    sqrt_dt: f64,
    position: PositionUpdate,
    rngs: Vec<ChaCha8Rng>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    drift: Vec<f64>,
    xi: Vec<f64>,
    noise: Vec<f64>,
    y_prev: Vec<f64>,
}

impl<'a> EulerStepper<'a> {
    pub fn new(model: &'a ModelSpec, x: Vec<f64>, y: Vec<f64>, dt: f64, seed: u64, position: PositionUpdate) -> Self {
        let d = model.d;
        Self {
            model,
            dt,
            sqrt_dt: dt.sqrt(),
            position,
            rngs: (0..d as u64).map(|a| axis_rng(seed, a)).collect(),
            x,
            y,
            drift: vec![0.0; d],
            xi: vec![0.0; d],
            noise: vec![0.0; d],
            y_prev: vec![0.0; d],
        }
    }

    /// Advances one step; returns `false` if the new state is not finite.
    #[inline]
    pub fn step(&mut self) -> bool {
        let d = self.model.d;
        self.model.drift_into(&self.x, &self.y, &mut self.drift);
        for (xi, rng) in self.xi.iter_mut().zip(self.rngs.iter_mut()) {
            *xi = rng.sample(StandardNormal);
        }
        self.model.apply_diffusion(&self.xi, &mut self.noise);
        self.y_prev.copy_from_slice(&self.y);
        let mut finite = true;
        for i in 0..d {
            self.y[i] += self.drift[i] * self.dt + self.noise[i] * self.sqrt_dt;
            self.x[i] += match self.position {
                PositionUpdate::Euler => self.y_prev[i] * self.dt,
                PositionUpdate::Trapezoidal => 0.5 * (self.y_prev[i] + self.y[i]) * self.dt,
            };
            finite &= self.x[i].is_finite() && self.y[i].is_finite();
        }
        finite
    }

    pub fn previous_velocity(&self) -> &[f64] {
        &self.y_prev
    }
}

/// Runs `n_steps` Euler steps without storing the path, calling
/// `visit(x_k, y_k, y_{k+1} − y_k)` for every step. Returns the terminal state.
pub fn stream_em<F>(
    model: &ModelSpec,
    z0: &[f64],
    n_steps: usize,
    dt: f64,
    seed: u64,
    position: PositionUpdate,
    mut visit: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], &[f64], &[f64]),
{
    let (x, y) = split_state(model, z0)?;
    let d = model.d;
    let mut stepper = EulerStepper::new(model, x, y, dt, seed, position);
    let mut x_prev = vec![0.0; d];
    let mut dy = vec![0.0; d];
    for k in 0..n_steps {
        x_prev.copy_from_slice(&stepper.x);
        if !stepper.step() {
            return Err(Error::Explosion { step: k + 1 });
        }
        let y_prev = stepper.previous_velocity();
        for i in 0..d {
            dy[i] = stepper.y[i] - y_prev[i];
        }
        visit(&x_prev, y_prev, &dy);
    }
    let mut z = stepper.x;
    z.extend_from_slice(&stepper.y);
    Ok(z)
}

/// Euler-Maruyama path of horizon `t` with the default configuration.
pub fn simulate_em(model: &ModelSpec, z0: &[f64], t: f64, dt: f64, seed: u64) -> Result<Trajectory> {
    simulate_em_with(model, z0, t, dt, seed, &SimConfig::default())
}

pub fn simulate_em_with(
    model: &ModelSpec,
    z0: &[f64],
    t: f64,
    dt: f64,
    seed: u64,
    config: &SimConfig,
) -> Result<Trajectory> {
    model.validate()?;
    let n = step_count(t, dt, config)?;
    let (x0, y0) = split_state(model, z0)?;
    let d = model.d;
    let mut xs = Vec::with_capacity((n + 1) * d);
    let mut ys = Vec::with_capacity((n + 1) * d);
    xs.extend_from_slice(&x0);
    ys.extend_from_slice(&y0);
    let mut stepper = EulerStepper::new(model, x0, y0, dt, seed, config.position);
    for k in 0..n {
        if !stepper.step() {
            return Err(Error::Explosion { step: k + 1 });
        }
        xs.extend_from_slice(&stepper.x);
        ys.extend_from_slice(&stepper.y);
    }
    Ok(Trajectory {
        model_id: model.id.clone(),
        d,
        dt,
        n_steps: n,
        seed,
        burn_in: 0.0,
        x: xs,
        y: ys,
    })
}

/// Exact Gaussian step of the free model, per axis:
/// `Y' = Y + σ₀√dt ξ₁`, `X' = X + Y dt + σ₀ dt^{3/2} (ξ₁/2 + ξ₂/(2√3))`.
#[inline]
fn free_exact_step(x: &mut f64, y: &mut f64, dt: f64, sigma0: f64, rng: &mut ChaCha8Rng) {
    let a: f64 = rng.sample(StandardNormal);
    let b: f64 = rng.sample(StandardNormal);
    let s = sigma0 * dt.sqrt();
    *x += *y * dt + s * dt * (0.5 * a + b / (2.0 * 3f64.sqrt()));
    *y += s * a;
}

/// Streaming variant of [`simulate_free_exact`].
pub fn stream_free_exact<F>(
    z0: &[f64],
    n_steps: usize,
    dt: f64,
    sigma0: f64,
    seed: u64,
    mut visit: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], &[f64], &[f64]),
{
    if !(sigma0 > 0.0) {
        return Err(invalid("sigma0", "must be positive"));
    }
    if z0.len() % 2 != 0 || z0.is_empty() {
        return Err(invalid("z0", "expected an even, nonzero number of coordinates"));
    }
    let d = z0.len() / 2;
    let mut x = z0[..d].to_vec();
    let mut y = z0[d..].to_vec();
    let mut rngs: Vec<ChaCha8Rng> = (0..d as u64).map(|a| axis_rng(seed, a)).collect();
    let mut x_prev = vec![0.0; d];
    let mut y_prev = vec![0.0; d];
    let mut dy = vec![0.0; d];
    for _ in 0..n_steps {
        x_prev.copy_from_slice(&x);
        y_prev.copy_from_slice(&y);
        for i in 0..d {
            free_exact_step(&mut x[i], &mut y[i], dt, sigma0, &mut rngs[i]);
            dy[i] = y[i] - y_prev[i];
        }
        visit(&x_prev, &y_prev, &dy);
    }
    x.extend_from_slice(&y);
    Ok(x)
}

/// Exact sampler of the free model `c = V = 0`, `σ = σ₀ I` on the grid `k dt`.
pub fn simulate_free_exact(z0: &[f64], t: f64, dt: f64, sigma0: f64, seed: u64) -> Result<Trajectory> {
    let config = SimConfig {
        dt_max: f64::INFINITY,
        ..SimConfig::default()
    };
    let n = step_count(t, dt, &config)?;
    let d = z0.len() / 2;
    let mut xs = Vec::with_capacity((n + 1) * d);
    let mut ys = Vec::with_capacity((n + 1) * d);
    let mut last = Vec::new();
    stream_free_exact(z0, n, dt, sigma0, seed, |x, y, _| {
        xs.extend_from_slice(x);
        ys.extend_from_slice(y);
    })
    .map(|z| last = z)?;
    xs.extend_from_slice(&last[..d]);
    ys.extend_from_slice(&last[d..]);
    Ok(Trajectory {
        model_id: "free-exact".into(),
        d,
        dt,
        n_steps: n,
        seed,
        burn_in: 0.0,
        x: xs,
        y: ys,
    })
}

/// How to draw an (approximately) stationary initial state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartRule {
    /// Run the Euler scheme from `anchor` for the burn-in horizon.
    Burn { anchor: Vec<f64> },
    /// Sample the closed-form Gibbs density directly (rejection per axis).
    Gibbs,
}

/// Initial state for estimation runs.
///
/// `Burn` with `burn_t = 0` returns the anchor itself.
pub fn stationary_start(model: &ModelSpec, burn_t: f64, dt: f64, seed: u64, rule: &StartRule) -> Result<Vec<f64>> {
    if !(burn_t >= 0.0) {
        return Err(invalid("burn_T", "must be >= 0"));
    }
    match rule {
        StartRule::Burn { anchor } => {
            let n = (burn_t / dt).round() as usize;
            stream_em(
                model,
                anchor,
                n,
                dt,
                splitmix64(seed ^ 0xB0B0),
                PositionUpdate::Euler,
                |_, _, _| {},
            )
        }
        StartRule::Gibbs => {
            let gibbs = GibbsDensity::new(model)?;
            let mut rng = axis_rng(splitmix64(seed ^ 0x61BB5), 0);
            let (mut x, y) = gibbs.sample(&mut rng);
            x.extend(y);
            Ok(x)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AssumptionFlags, Damping, Diffusion, Potential};

    fn deterministic(gamma: f64) -> ModelSpec {
        ModelSpec::new(
            "ode",
            1,
            Damping::Scalar(gamma),
            Potential::Zero,
            Diffusion::Scalar(0.0),
            AssumptionFlags {
                c_bounded: true,
                sigma_elliptic_bounded: false,
                v_lower_bounded: true,
                erg_condition: false,
            },
        )
        .unwrap()
    }

    #[test]
    fn free_motion_is_exact() {
        let m = deterministic(0.0);
        let tr = simulate_em(&m, &[0.5, 2.0], 1.0, 0.01, 3).unwrap();
        assert_eq!(tr.n_steps, 100);
        for k in 0..=tr.n_steps {
            assert_eq!(tr.y_at(k)[0], 2.0);
            assert!((tr.x_at(k)[0] - (0.5 + 2.0 * k as f64 * 0.01)).abs() < 1e-12);
        }
    }

    #[test]
    fn damped_velocity_tracks_ode() {
        let gamma = 1.5;
        let y0 = 1.0;
        for dt in [0.01, 0.005] {
            let tr = simulate_em(&deterministic(gamma), &[0.0, y0], 2.0, dt, 1).unwrap();
            let mut worst: f64 = 0.0;
            for k in 0..=tr.n_steps {
                let t = k as f64 * dt;
                let exact = y0 * (1.0 - (-gamma * t).exp()) / gamma;
                worst = worst.max((tr.x_at(k)[0] - exact).abs());
            }
            assert!(worst < 0.5 * dt, "dt {dt}: {worst}");
        }
    }

    #[test]
    fn seed_determinism() {
        let m = ModelSpec::langevin(2, 1.0, 1.0).unwrap();
        let a = simulate_em(&m, &[0.0; 4], 5.0, 0.01, 77).unwrap();
        let b = simulate_em(&m, &[0.0; 4], 5.0, 0.01, 77).unwrap();
        let c = simulate_em(&m, &[0.0; 4], 5.0, 0.01, 78).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.y, c.y);
    }

    #[test]
    fn position_increments_are_noise_free() {
        let m = ModelSpec::langevin(1, 1.0, 1.0).unwrap();
        let tr = simulate_em(&m, &[0.0, 0.0], 1.0, 0.01, 5).unwrap();
        for k in 0..tr.n_steps {
            let dx = tr.x_at(k + 1)[0] - tr.x_at(k)[0];
            assert!((dx - tr.y_at(k)[0] * tr.dt).abs() < 1e-15);
        }
    }

    #[test]
    fn trapezoidal_option() {
        let m = ModelSpec::langevin(1, 1.0, 1.0).unwrap();
        let cfg = SimConfig {
            position: PositionUpdate::Trapezoidal,
            ..SimConfig::default()
        };
        let tr = simulate_em_with(&m, &[0.0, 0.0], 1.0, 0.01, 5, &cfg).unwrap();
        for k in 0..tr.n_steps {
            let dx = tr.x_at(k + 1)[0] - tr.x_at(k)[0];
            let mid = 0.5 * (tr.y_at(k)[0] + tr.y_at(k + 1)[0]) * tr.dt;
            assert!((dx - mid).abs() < 1e-15);
        }
    }

    #[test]
    fn quadratic_variation_of_position_vanishes() {
        let m = ModelSpec::langevin(1, 1.0, 1.0).unwrap();
        let mut ratios = Vec::new();
        for dt in [0.01, 0.001] {
            let tr = simulate_em(&m, &[0.0, 0.0], 10.0, dt, 11).unwrap();
            let (mut qx, mut qy) = (0.0, 0.0);
            for k in 0..tr.n_steps {
                qx += (tr.x_at(k + 1)[0] - tr.x_at(k)[0]).powi(2);
                qy += (tr.y_at(k + 1)[0] - tr.y_at(k)[0]).powi(2);
            }
            ratios.push(qx / qy);
        }
        // Σ(ΔX)² / Σ(ΔY)² = O(dt)
        let shrink = ratios[0] / ratios[1];
        assert!(ratios[1] < 1e-3 && (5.0..20.0).contains(&shrink), "{ratios:?}");
    }

    #[test]
    fn explosion_reports_step() {
        let m = ModelSpec::double_well(1, 0.0, 1.0, 50.0).unwrap();
        match simulate_em(&m, &[30.0, 0.0], 1.0, 0.1, 1) {
            Err(Error::Explosion { step }) => assert!(step >= 1 && step <= 10),
            other => panic!("expected explosion, got {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_grid() {
        let m = ModelSpec::langevin(1, 1.0, 1.0).unwrap();
        assert!(simulate_em(&m, &[0.0, 0.0], 1.0, 0.3, 1).is_err());
        assert!(simulate_em(&m, &[0.0, 0.0], 1.05, 0.1, 1).is_err());
        assert!(simulate_em(&m, &[0.0], 1.0, 0.1, 1).is_err());
        assert!(simulate_free_exact(&[0.0, 0.0], 1.0, 0.1, 0.0, 1).is_err());
    }

    #[test]
    fn burn_zero_returns_anchor() {
        let m = ModelSpec::langevin(1, 1.0, 1.0).unwrap();
        let anchor = vec![0.3, -0.2];
        let z = stationary_start(&m, 0.0, 0.01, 4, &StartRule::Burn { anchor: anchor.clone() }).unwrap();
        assert_eq!(z, anchor);
    }

    fn ks_p_value(mut draws: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
        draws.sort_by(f64::total_cmp);
        let n = draws.len() as f64;
        let stat = draws
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let f = cdf(v);
                (f - i as f64 / n).max((i + 1) as f64 / n - f)
            })
            .fold(0.0, f64::max);
        let lambda = stat * n.sqrt();
        (1..100)
            .map(|k| 2.0 * (-1f64).powi(k - 1) * (-2.0 * (k * k) as f64 * lambda * lambda).exp())
            .sum::<f64>()
            .clamp(0.0, 1.0)
    }

    #[test]
    fn stationary_draws_follow_gibbs_marginals() {
        use statrs::distribution::{ContinuousCDF, Normal};
        let m = ModelSpec::langevin(1, 1.0, 1.0).unwrap();
        let marginal = Normal::new(0.0, 0.5f64.sqrt()).unwrap();
        let burn = StartRule::Burn { anchor: vec![0.0, 0.0] };
        for rule in [StartRule::Gibbs, burn] {
            let draws: Vec<Vec<f64>> = (0..1000)
                .map(|s| stationary_start(&m, 10.0, 0.01, s, &rule).unwrap())
                .collect();
            assert_ne!(draws[0], draws[1]);
            for axis in 0..2 {
                let p = ks_p_value(draws.iter().map(|z| z[axis]).collect(), |v| marginal.cdf(v));
                assert!(p > 0.01, "{rule:?} axis {axis}: p = {p}");
            }
        }
    }

    #[test]
    fn stream_matches_stored_path() {
        let m = ModelSpec::langevin(1, 1.0, 1.0).unwrap();
        let tr = simulate_em(&m, &[0.1, 0.2], 1.0, 0.01, 8).unwrap();
        let mut k = 0;
        let end = stream_em(&m, &[0.1, 0.2], 100, 0.01, 8, PositionUpdate::Euler, |x, y, dy| {
            assert_eq!(x, tr.x_at(k));
            assert_eq!(y, tr.y_at(k));
            assert!((dy[0] - (tr.y_at(k + 1)[0] - tr.y_at(k)[0])).abs() < 1e-15);
            k += 1;
        })
        .unwrap();
        assert_eq!(end, vec![tr.x_at(100)[0], tr.y_at(100)[0]]);
    }
}
