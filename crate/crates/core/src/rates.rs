//! Rate calculus for kinetic diffusions.
//!
//! Everything here is a pure function of the smoothness indices, the half
//! dimension `d` and the velocity gap `eps` of the estimation domain
//! (`eps = inf ‖y‖` over the domain). Constants hidden behind `∼` in the
//! asymptotic statements are set to one; they cancel in log-log slope fits.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Anisotropic Hölder smoothness: `beta1`/`l1` for the position axes,
/// `beta2`/`l2` for the velocity axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessParams {
    pub beta1: f64,
    pub beta2: f64,
    pub l1: f64,
    pub l2: f64,
}

impl SmoothnessParams {
    pub fn new(beta1: f64, beta2: f64, l1: f64, l2: f64) -> Result<Self> {
        let p = Self { beta1, beta2, l1, l2 };
        p.validate()?;
        Ok(p)
    }

    /// Unit Hölder constants.
    pub fn isotropic_constants(beta1: f64, beta2: f64) -> Result<Self> {
        Self::new(beta1, beta2, 1.0, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        positive("beta1", self.beta1)?;
        positive("beta2", self.beta2)?;
        positive("l1", self.l1)?;
        positive("l2", self.l2)
    }

    pub fn harmonic_mean(&self) -> f64 {
        harmonic_mean(self.beta1, self.beta2)
    }
}

/// Inputs selecting a branch of the rate calculus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeKey {
    pub beta1: f64,
    pub beta2: f64,
    pub d: usize,
    pub eps: f64,
}

impl RegimeKey {
    pub fn new(beta1: f64, beta2: f64, d: usize, eps: f64) -> Result<Self> {
        let k = Self { beta1, beta2, d, eps };
        k.validate()?;
        Ok(k)
    }

    pub fn from_params(params: &SmoothnessParams, d: usize, eps: f64) -> Result<Self> {
        Self::new(params.beta1, params.beta2, d, eps)
    }

    pub fn validate(&self) -> Result<()> {
        positive("beta1", self.beta1)?;
        positive("beta2", self.beta2)?;
        if self.d < 1 {
            return Err(invalid("d", "half dimension must be at least 1"));
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(invalid("eps", format!("must be finite and >= 0, got {}", self.eps)));
        }
        Ok(())
    }

    pub fn harmonic_mean(&self) -> f64 {
        harmonic_mean(self.beta1, self.beta2)
    }

    fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }
}

/// `2 / (1/beta1 + 1/beta2)`.
pub fn harmonic_mean(beta1: f64, beta2: f64) -> f64 {
    2.0 / (1.0 / beta1 + 1.0 / beta2)
}

/// The six closed-form pieces of the rate-improvement exponent `Υ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpsilonBranch {
    /// `3β₁ ≥ β₂, d = 1, ε = 0`
    FlatPositionD1,
    /// `3β₁ ≥ β₂, d ≥ 2, ε = 0`
    FlatPositionHigh,
    /// `3β₁ < β₂, ε = 0`
    FlatVelocity,
    /// `2β₁ ≥ β₂, d = 1, ε > 0`
    GapPositionD1,
    /// `2β₁ ≥ β₂, d ≥ 2, ε > 0`
    GapPositionHigh,
    /// `2β₁ < β₂, ε > 0`
    GapVelocity,
}

impl UpsilonBranch {
    /// Branch selected for `key`. Boundaries belong to the closed (`≥`) branch.
    pub fn select(key: &RegimeKey) -> Self {
        let (b1, b2) = (key.beta1, key.beta2);
        if key.eps == 0.0 {
            if 3.0 * b1 >= b2 {
                if key.d == 1 {
                    Self::FlatPositionD1
                } else {
                    Self::FlatPositionHigh
                }
            } else {
                Self::FlatVelocity
            }
        } else if 2.0 * b1 >= b2 {
            if key.d == 1 {
                Self::GapPositionD1
            } else {
                Self::GapPositionHigh
            }
        } else {
            Self::GapVelocity
        }
    }

    /// Evaluates this branch's formula regardless of whether it is the active one.
    pub fn eval(self, beta1: f64, beta2: f64) -> f64 {
        let s = beta1 + beta2;
        match self {
            Self::FlatPositionD1 => (2.0 / 3.0) * (3.0 * beta1 + beta2) / s,
            Self::FlatPositionHigh | Self::GapPositionHigh => 4.0 * beta1 / s,
            Self::FlatVelocity => 2.0 * (beta2 - beta1) / s,
            Self::GapPositionD1 => (2.0 * beta1 + beta2) / s,
            Self::GapVelocity => 2.0 * beta2 / s,
        }
    }
}

/// Rate-improvement exponent `Υ(β₁, β₂, d, ε)`.
///
/// Lies in `(0, 2]` for `d = 1`; the `4β₁/(β₁+β₂)` pieces reach up to 4 when
/// `d ≥ 2` and `β₁ > β₂`, which still leaves `2(β̄ + d) − Υ > 0`.
pub fn upsilon(key: &RegimeKey) -> Result<f64> {
    key.validate()?;
    Ok(UpsilonBranch::select(key).eval(key.beta1, key.beta2))
}

/// Exponent `β̄ / (2(β̄ + d) − Υ)` of the `(log T / T)` rate.
pub fn psi_exponent(key: &RegimeKey) -> Result<f64> {
    let ups = upsilon(key)?;
    Ok(psi_exponent_with_upsilon(key, ups))
}

/// Exponent with an explicit `Υ`; `Υ = 0` gives the i.i.d. benchmark `β̄/(2(β̄+d))`.
pub fn psi_exponent_with_upsilon(key: &RegimeKey, upsilon: f64) -> f64 {
    let bbar = key.harmonic_mean();
    bbar / (2.0 * (bbar + key.d as f64) - upsilon)
}

/// Classical exponent `β̄/(2(β̄+d))`, also the drift-estimation rate.
pub fn classical_exponent(params: &SmoothnessParams, d: usize) -> f64 {
    let bbar = params.harmonic_mean();
    bbar / (2.0 * (bbar + d as f64))
}

fn check_horizon(t: f64) -> Result<()> {
    if t.is_finite() && t > std::f64::consts::E {
        Ok(())
    } else {
        Err(Error::HorizonTooShort(t))
    }
}

/// `Ψ(T, β₁, β₂, d, ε) = (log T / T)^{β̄ / (2(β̄+d) − Υ)}`.
pub fn psi_rate(t: f64, key: &RegimeKey) -> Result<f64> {
    check_horizon(t)?;
    let exponent = psi_exponent(key)?;
    Ok((t.ln() / t).powf(exponent))
}

/// Same as [`psi_rate`] with `Υ` overridden (comparison mode).
pub fn psi_rate_with_upsilon(t: f64, key: &RegimeKey, upsilon: f64) -> Result<f64> {
    check_horizon(t)?;
    key.validate()?;
    Ok((t.ln() / t).powf(psi_exponent_with_upsilon(key, upsilon)))
}

/// Membership in the exceptional set where an extra `√(log T)` appears.
pub fn chi_b_member(key: &RegimeKey) -> Result<bool> {
    key.validate()?;
    let (b1, b2, d) = (key.beta1, key.beta2, key.d);
    let flat = key.eps == 0.0;
    Ok((3.0 * b1 < b2 && d == 1 && flat) || (3.0 * b1 > b2 && d == 2 && flat) || (2.0 * b1 > b2 && d == 2 && !flat))
}

/// `χ_B(T, ·)`: `√(log T)` inside the exceptional set, 1 outside.
pub fn chi_b(t: f64, key: &RegimeKey) -> Result<f64> {
    check_horizon(t)?;
    Ok(if chi_b_member(key)? { t.ln().sqrt() } else { 1.0 })
}

/// Variance scale `ψ_d(s1, s2, T)` (general) or `ψ°_d(s1, s2, T)` (refined,
/// domains bounded away from zero velocity).
pub fn psi_variance_scale(s1: f64, s2: f64, d: usize, t: f64, refined: bool) -> Result<f64> {
    unit_scale("s1", s1)?;
    unit_scale("s2", s2)?;
    if d < 1 {
        return Err(invalid("d", "half dimension must be at least 1"));
    }
    check_horizon(t)?;
    let df = d as f64;
    let log_root = t.ln().sqrt();
    let second = match d {
        1 => s1.powf(-1.0 / 3.0),
        2 => log_root / s1,
        _ => s1.powf(-df / 2.0) * s2.powf(1.0 - df / 2.0),
    };
    if refined {
        let first = s1.powf((1.0 - df) / 2.0) * s2.powf(-df / 2.0);
        let second = if d == 1 { s1.powf(-0.25) } else { second };
        Ok(first.max(second))
    } else {
        let first = if d == 1 {
            log_root / s2
        } else {
            s1.powf((1.0 - df) / 2.0) * s2.powf(-(1.0 + df) / 2.0)
        };
        Ok(first.max(second))
    }
}

/// Which estimator a bandwidth prescription is for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Density,
    Drift,
}

impl std::str::FromStr for Target {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "density" => Ok(Self::Density),
            "drift" => Ok(Self::Drift),
            other => Err(invalid("target", format!("expected density or drift, got {other}"))),
        }
    }
}

/// Rate-optimal bandwidth pair.
///
/// Density: `h_i = Ψ(T, β₁, β₂, d, ε)^{1/β_i}` with `ε` taken from `key`.
/// Drift: `h_i = (log T / T)^{β̄ / (β_i (2β̄ + d))}`. Both satisfy `h₁^{β₁} = h₂^{β₂}`.
pub fn bandwidth_from_smoothness(
    t: f64,
    params: &SmoothnessParams,
    key: &RegimeKey,
    target: Target,
) -> Result<(f64, f64)> {
    params.validate()?;
    key.validate()?;
    if params.beta1 != key.beta1 || params.beta2 != key.beta2 {
        return Err(invalid(
            "key",
            "regime key smoothness differs from the smoothness parameters",
        ));
    }
    check_horizon(t)?;
    let (h1, h2) = match target {
        Target::Density => {
            let psi = psi_rate(t, key)?;
            (psi.powf(1.0 / params.beta1), psi.powf(1.0 / params.beta2))
        }
        Target::Drift => {
            let bbar = params.harmonic_mean();
            let base = t.ln() / t;
            let d = key.d as f64;
            (
                base.powf(bbar / (params.beta1 * (2.0 * bbar + d))),
                base.powf(bbar / (params.beta2 * (2.0 * bbar + d))),
            )
        }
    };
    for h in [h1, h2] {
        if h > 1.0 {
            return Err(Error::BandwidthAboveOne { value: h, horizon: t });
        }
    }
    Ok((h1, h2))
}

/// Stabilizer `r_T = (Ψ χ_B)(T, β₁, β₂, d, 0) · exp(√(log T))` of the
/// Nadaraya-Watson drift estimator.
pub fn truncation_r_t(t: f64, params: &SmoothnessParams, d: usize) -> Result<f64> {
    params.validate()?;
    let key = RegimeKey::from_params(params, d, 0.0)?;
    Ok(psi_rate(t, &key)? * chi_b(t, &key)? * t.ln().sqrt().exp())
}

/// All rate quantities for one configuration, as printed by `kinetic rates`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RateSummary {
    pub upsilon: f64,
    pub psi: f64,
    #[serde(rename = "chi_B")]
    pub chi_b: f64,
    pub exponent: f64,
    pub h1: f64,
    pub h2: f64,
    #[serde(rename = "r_T")]
    pub r_t: f64,
}

pub fn summarize(t: f64, params: &SmoothnessParams, key: &RegimeKey, target: Target) -> Result<RateSummary> {
    let (h1, h2) = bandwidth_from_smoothness(t, params, key, target)?;
    let exponent = match target {
        Target::Density => psi_exponent(key)?,
        Target::Drift => classical_exponent(params, key.d),
    };
    Ok(RateSummary {
        upsilon: upsilon(key)?,
        psi: psi_rate(t, key)?,
        chi_b: chi_b(t, key)?,
        exponent,
        h1,
        h2,
        r_t: truncation_r_t(t, params, key.d)?,
    })
}

/// Convenience: the key with `eps` forced to zero (general-domain regime).
pub fn flat_key(key: &RegimeKey) -> RegimeKey {
    key.with_eps(0.0)
}

fn positive(name: &'static str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(name, format!("must be positive and finite, got {v}")))
    }
}

fn unit_scale(name: &'static str, v: f64) -> Result<()> {
    if v > 0.0 && v <= 1.0 {
        Ok(())
    } else {
        Err(invalid(name, format!("must lie in (0, 1], got {v}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::E;

    fn key(b1: f64, b2: f64, d: usize, eps: f64) -> RegimeKey {
        RegimeKey::new(b1, b2, d, eps).unwrap()
    }

    #[test]
    fn upsilon_examples() {
        assert_eq!(upsilon(&key(1.0, 1.0, 2, 0.0)).unwrap(), 2.0);
        assert!((upsilon(&key(1.0, 4.0, 1, 0.0)).unwrap() - 1.2).abs() < 1e-15);
        let a = UpsilonBranch::FlatPositionD1.eval(1.0, 3.0);
        let b = UpsilonBranch::FlatVelocity.eval(1.0, 3.0);
        assert!((a - 1.0).abs() < 1e-15 && (b - 1.0).abs() < 1e-15);
        assert!((upsilon(&key(1.0, 3.0, 1, 0.0)).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn upsilon_rejects_bad_keys() {
        assert!(RegimeKey::new(1.0, 1.0, 0, 0.0).is_err());
        assert!(RegimeKey::new(-1.0, 1.0, 1, 0.0).is_err());
        let bad = RegimeKey {
            beta1: 0.0,
            beta2: 1.0,
            d: 1,
            eps: 0.0,
        };
        assert!(upsilon(&bad).is_err());
    }

    #[test]
    fn psi_rate_values() {
        // β₁ = β₂ = 2, d = 1, ε = 0: Υ = (2/3)(3·2+2)/4 = 4/3, exponent 2/(6 - 4/3) = 3/7.
        let k = key(2.0, 2.0, 1, 0.0);
        assert!((upsilon(&k).unwrap() - 4.0 / 3.0).abs() < 1e-15);
        assert!((psi_exponent(&k).unwrap() - 3.0 / 7.0).abs() < 1e-15);
        let t = E * E;
        let expected = (2.0 / (E * E)).powf(3.0 / 7.0);
        assert!((psi_rate(t, &k).unwrap() - expected).abs() < 1e-14);
        assert!(psi_rate(E, &k).is_err());
        assert!(psi_rate(2.0, &k).is_err());
    }

    #[test]
    fn zero_upsilon_is_iid_rate() {
        let k = key(1.5, 2.5, 2, 0.0);
        let bbar = harmonic_mean(1.5, 2.5);
        assert!((psi_exponent_with_upsilon(&k, 0.0) - bbar / (2.0 * (bbar + 2.0))).abs() < 1e-15);
        let t = 1e5;
        let v = psi_rate_with_upsilon(t, &k, 0.0).unwrap();
        assert!((v - (t.ln() / t).powf(bbar / (2.0 * (bbar + 2.0)))).abs() < 1e-15);
    }

    #[test]
    fn chi_b_truth_table() {
        assert!(chi_b_member(&key(1.0, 4.0, 1, 0.0)).unwrap());
        assert!(chi_b_member(&key(2.0, 3.0, 2, 0.5)).unwrap());
        assert!(chi_b_member(&key(1.0, 1.0, 2, 0.0)).unwrap());
        assert!(!chi_b_member(&key(1.0, 1.0, 3, 0.0)).unwrap());
        assert!(!chi_b_member(&key(1.0, 3.0, 2, 0.0)).unwrap());
        assert!(!chi_b_member(&key(2.0, 4.0, 2, 0.5)).unwrap());
        assert!(!chi_b_member(&key(1.0, 1.0, 1, 0.0)).unwrap());
        let t = 100.0;
        assert_eq!(chi_b(t, &key(1.0, 1.0, 1, 0.0)).unwrap(), 1.0);
        assert!((chi_b(t, &key(1.0, 4.0, 1, 0.0)).unwrap() - t.ln().sqrt()).abs() < 1e-15);
    }

    #[test]
    fn psi_variance_examples() {
        let t = 1e4;
        let s = 0.01;
        let v = psi_variance_scale(s, s, 2, t, false).unwrap();
        let first = s.powf(-0.5) * s.powf(-1.5);
        let second = t.ln().sqrt() / s;
        assert!((v - first.max(second)).abs() < 1e-9 * v);
        assert!((v - s.powi(-2)).abs() < 1e-9 * v);

        let (s1, s2) = (0.1, 0.3);
        let v = psi_variance_scale(s1, s2, 1, t, true).unwrap();
        assert!((v - s2.powf(-0.5).max(s1.powf(-0.25))).abs() < 1e-15);

        for d in 1..5 {
            for refined in [false, true] {
                let v = psi_variance_scale(1.0, 1.0, d, t, refined).unwrap();
                assert!(v.is_finite() && v > 0.0);
            }
        }
        assert!(psi_variance_scale(0.0, 0.5, 1, t, false).is_err());
        assert!(psi_variance_scale(0.5, 1.5, 1, t, false).is_err());
        assert!(psi_variance_scale(0.5, 0.5, 1, 2.0, false).is_err());
    }

    #[test]
    fn refined_never_worse() {
        let ladder = [1.0, 0.5, 0.2, 0.1, 0.03, 0.01, 1e-3];
        for d in 1..=4 {
            for &t in &[3.0, 10.0, 1e3, 1e6] {
                for &s1 in &ladder {
                    for &s2 in &ladder {
                        let g = psi_variance_scale(s1, s2, d, t, false).unwrap();
                        let r = psi_variance_scale(s1, s2, d, t, true).unwrap();
                        assert!(r <= g * (1.0 + 1e-12), "d={d} t={t} s=({s1},{s2}): {r} > {g}");
                    }
                }
            }
        }
    }

    #[test]
    fn drift_bandwidth_isotropic() {
        let p = SmoothnessParams::isotropic_constants(2.0, 2.0).unwrap();
        let k = RegimeKey::from_params(&p, 1, 0.0).unwrap();
        let t = 1e5;
        let (h1, h2) = bandwidth_from_smoothness(t, &p, &k, Target::Drift).unwrap();
        let expected = (t.ln() / t).powf(1.0 / 5.0);
        assert!((h1 - expected).abs() < 1e-15 && (h2 - expected).abs() < 1e-15);
    }

    #[test]
    fn density_bandwidth_composes_psi() {
        let p = SmoothnessParams::isotropic_constants(1.5, 3.0).unwrap();
        let k = RegimeKey::from_params(&p, 1, 0.0).unwrap();
        let t = 1e4;
        let psi = psi_rate(t, &k).unwrap();
        let (h1, h2) = bandwidth_from_smoothness(t, &p, &k, Target::Density).unwrap();
        assert!((h1 - psi.powf(1.0 / 1.5)).abs() < 1e-15);
        assert!((h2 - psi.powf(1.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn bandwidth_rejects_mismatched_key() {
        let p = SmoothnessParams::isotropic_constants(2.0, 2.0).unwrap();
        let k = key(2.0, 3.0, 1, 0.0);
        assert!(bandwidth_from_smoothness(1e4, &p, &k, Target::Density).is_err());
    }

    #[test]
    fn truncation_examples() {
        let p = SmoothnessParams::isotropic_constants(2.0, 2.0).unwrap();
        let k = RegimeKey::from_params(&p, 1, 0.0).unwrap();
        let t = E.powi(4);
        let r = truncation_r_t(t, &p, 1).unwrap();
        let psi = psi_rate(t, &k).unwrap();
        assert!(!chi_b_member(&k).unwrap());
        assert!((r - psi * E * E).abs() < 1e-13);
        let ladder: Vec<f64> = (16..40).map(|k| truncation_r_t(E.powi(k), &p, 1).unwrap()).collect();
        for w in ladder.windows(2) {
            assert!(w[1] < w[0]);
        }
        assert!(truncation_r_t(2.0, &p, 1).is_err());
    }

    #[test]
    fn summary_serializes_expected_keys() {
        let p = SmoothnessParams::isotropic_constants(2.0, 2.0).unwrap();
        let k = RegimeKey::from_params(&p, 1, 0.5).unwrap();
        let s = summarize(1e4, &p, &k, Target::Density).unwrap();
        let v = serde_json::to_value(&s).unwrap();
        for name in ["upsilon", "psi", "chi_B", "exponent", "h1", "h2", "r_T"] {
            assert!(v.get(name).is_some(), "missing {name}");
        }
    }

    proptest! {
        #[test]
        fn harmonic_mean_between_extremes(b1 in 0.01f64..50.0, b2 in 0.01f64..50.0) {
            let m = harmonic_mean(b1, b2);
            prop_assert!(m >= b1.min(b2) * (1.0 - 1e-12));
            prop_assert!(m <= b1.max(b2) * (1.0 + 1e-12));
        }

        #[test]
        fn upsilon_range(b1 in 0.01f64..20.0, b2 in 0.01f64..20.0, d in 1usize..6, gap in proptest::bool::ANY) {
            let eps = if gap { 0.5 } else { 0.0 };
            let k = key(b1, b2, d, eps);
            let u = upsilon(&k).unwrap();
            // 4β₁/(β₁+β₂) reaches 4 for d ≥ 2; the rate denominator stays positive.
            let cap = if d == 1 || b1 <= b2 { 2.0 } else { 4.0 };
            prop_assert!(u > 0.0 && u <= cap + 1e-12);
            prop_assert!(2.0 * (k.harmonic_mean() + d as f64) - u > 0.0);
        }

        #[test]
        fn kinetic_exponent_beats_iid(b1 in 0.05f64..20.0, b2 in 0.05f64..20.0, d in 1usize..6, gap in proptest::bool::ANY) {
            let k = key(b1, b2, d, if gap { 0.3 } else { 0.0 });
            prop_assert!(psi_exponent(&k).unwrap() > psi_exponent_with_upsilon(&k, 0.0));
        }

        #[test]
        fn psi_decreasing_in_t(b1 in 0.1f64..10.0, b2 in 0.1f64..10.0, d in 1usize..4, t in 3.0f64..1e8) {
            let k = key(b1, b2, d, 0.0);
            prop_assert!(psi_rate(t * 1.5, &k).unwrap() < psi_rate(t, &k).unwrap());
        }

        #[test]
        fn balanced_bias(b1 in 0.5f64..6.0, b2 in 0.5f64..6.0, logt in 2.0f64..25.0, eps in prop_oneof![Just(0.0), Just(0.4)], d in 1usize..4) {
            let p = SmoothnessParams::isotropic_constants(b1, b2).unwrap();
            let k = RegimeKey::from_params(&p, d, eps).unwrap();
            let t = logt.exp();
            for target in [Target::Density, Target::Drift] {
                let (h1, h2) = bandwidth_from_smoothness(t, &p, &k, target).unwrap();
                let (a, b) = (h1.powf(b1), h2.powf(b2));
                prop_assert!((a - b).abs() <= 1e-12 * a.max(b));
            }
        }
    }
}
