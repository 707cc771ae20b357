//! Kinetic SDE models
//!
//! ```text
//! dX_t = Y_t dt
//! dY_t = −(c(X_t, Y_t) Y_t + ∇V(X_t)) dt + σ(X_t, Y_t) dW_t
//! ```
//!
//! with a small catalog of benchmark instances, simulators, and closed-form
//! oracles (free Gaussian transition law, Gibbs invariant density).

mod oracle;
mod sim;

pub use oracle::{
    autocorrelation, decorrelation_lag, fit_envelope_constant, fokker_planck_residual, free_transition_density,
    gaussian_envelope, gibbs_invariant_density, GibbsDensity,
};
pub use sim::{
    simulate_em, simulate_em_with, simulate_free_exact, stationary_start, stream_em, stream_free_exact, EulerStepper,
    PositionUpdate, SimConfig, StartRule,
};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Damping matrix `c(x, y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Damping {
    /// `γ I`
    Scalar(f64),
    /// Constant row-major `d × d` matrix.
    Matrix(Vec<f64>),
    /// `(base + bump / (1 + ‖x‖²)) I`: bounded, position dependent.
    PositionModulated { base: f64, bump: f64 },
}

/// Separable potential `V(x) = Σ_i v(x_i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Potential {
    Zero,
    /// `v(s) = k s² / 2`
    Quadratic {
        stiffness: f64,
    },
    /// `v(s) = depth (s² − 1)²`
    DoubleWell {
        depth: f64,
    },
}

impl Potential {
    #[inline]
    pub fn value_1d(&self, s: f64) -> f64 {
        match *self {
            Self::Zero => 0.0,
            Self::Quadratic { stiffness } => 0.5 * stiffness * s * s,
            Self::DoubleWell { depth } => depth * (s * s - 1.0).powi(2),
        }
    }

    #[inline]
    pub fn gradient_1d(&self, s: f64) -> f64 {
        match *self {
            Self::Zero => 0.0,
            Self::Quadratic { stiffness } => stiffness * s,
            Self::DoubleWell { depth } => 4.0 * depth * s * (s * s - 1.0),
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        x.iter().map(|&s| self.value_1d(s)).sum()
    }

    /// Whether `⟨∇V(x), x⟩ / |x| → ∞`.
    pub fn is_confining(&self) -> bool {
        match *self {
            Self::Zero => false,
            Self::Quadratic { stiffness } => stiffness > 0.0,
            Self::DoubleWell { depth } => depth > 0.0,
        }
    }
}

/// Diffusion matrix `σ(x, y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Diffusion {
    /// `σ₀ I`
    Scalar(f64),
    /// Constant row-major `d × d` matrix.
    Matrix(Vec<f64>),
}

/// Which of the explicit coefficient assumptions a model is declared to meet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssumptionFlags {
    pub c_bounded: bool,
    pub sigma_elliptic_bounded: bool,
    pub v_lower_bounded: bool,
    pub erg_condition: bool,
}

/// One kinetic SDE instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub id: String,
    pub d: usize,
    pub damping: Damping,
    pub potential: Potential,
    pub diffusion: Diffusion,
    pub flags: AssumptionFlags,
}

impl ModelSpec {
    pub fn new(
        id: impl Into<String>,
        d: usize,
        damping: Damping,
        potential: Potential,
        diffusion: Diffusion,
        flags: AssumptionFlags,
    ) -> Result<Self> {
        let m = Self {
            id: id.into(),
            d,
            damping,
            potential,
            diffusion,
            flags,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 1 {
            return Err(invalid("d", "half dimension must be at least 1"));
        }
        let dd = self.d * self.d;
        if let Damping::Matrix(m) = &self.damping {
            if m.len() != dd {
                return Err(invalid("damping", format!("expected {dd} entries, got {}", m.len())));
            }
        }
        if let Diffusion::Matrix(m) = &self.diffusion {
            if m.len() != dd {
                return Err(invalid("diffusion", format!("expected {dd} entries, got {}", m.len())));
            }
            if self.flags.sigma_elliptic_bounded {
                for i in 0..self.d {
                    for j in 0..i {
                        if (m[i * self.d + j] - m[j * self.d + i]).abs() > 1e-12 {
                            return Err(invalid("diffusion", "declared elliptic but not symmetric"));
                        }
                    }
                }
            }
        }
        if let Diffusion::Scalar(s) = self.diffusion {
            if self.flags.sigma_elliptic_bounded && !(s > 0.0) {
                return Err(invalid("diffusion", "declared elliptic but σ₀ <= 0"));
            }
        }
        Ok(())
    }

    /// Free motion `c = 0`, `V = 0`, `σ = σ₀ I`.
    pub fn free(d: usize, sigma0: f64) -> Result<Self> {
        Self::new(
            "free",
            d,
            Damping::Scalar(0.0),
            Potential::Zero,
            Diffusion::Scalar(sigma0),
            AssumptionFlags {
                c_bounded: true,
                sigma_elliptic_bounded: sigma0 > 0.0,
                v_lower_bounded: true,
                erg_condition: false,
            },
        )
    }

    /// Kinetic Langevin with `c = γ I`, `V(x) = ‖x‖²/2`, `σ = σ₀ I`.
    pub fn langevin(d: usize, gamma: f64, sigma0: f64) -> Result<Self> {
        Self::new(
            "langevin",
            d,
            Damping::Scalar(gamma),
            Potential::Quadratic { stiffness: 1.0 },
            Diffusion::Scalar(sigma0),
            AssumptionFlags {
                c_bounded: true,
                sigma_elliptic_bounded: sigma0 > 0.0,
                v_lower_bounded: true,
                erg_condition: true,
            },
        )
    }

    /// Kinetic Langevin in the double well `V(x) = Σ depth (x_i² − 1)²`.
    pub fn double_well(d: usize, gamma: f64, sigma0: f64, depth: f64) -> Result<Self> {
        Self::new(
            "double-well",
            d,
            Damping::Scalar(gamma),
            Potential::DoubleWell { depth },
            Diffusion::Scalar(sigma0),
            AssumptionFlags {
                c_bounded: true,
                sigma_elliptic_bounded: sigma0 > 0.0,
                v_lower_bounded: true,
                erg_condition: true,
            },
        )
    }

    /// Catalog lookup: `free`, `langevin`, `double-well`.
    pub fn catalog(name: &str, d: usize) -> Result<Self> {
        match name {
            "free" => Self::free(d, 1.0),
            "langevin" => Self::langevin(d, 1.0, 1.0),
            "double-well" => Self::double_well(d, 1.0, 1.0, 1.0),
            other => Err(invalid("model", format!("unknown catalog model `{other}`"))),
        }
    }

    /// Drift `b(x, y) = −(c(x, y) y + ∇V(x))` written into `out`.
    #[inline]
    pub fn drift_into(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        let d = self.d;
        match &self.damping {
            Damping::Scalar(g) => {
                for i in 0..d {
                    out[i] = -g * y[i];
                }
            }
            Damping::Matrix(m) => {
                for i in 0..d {
                    out[i] = -(0..d).map(|j| m[i * d + j] * y[j]).sum::<f64>();
                }
            }
            Damping::PositionModulated { base, bump } => {
                let r2: f64 = x.iter().map(|v| v * v).sum();
                let g = base + bump / (1.0 + r2);
                for i in 0..d {
                    out[i] = -g * y[i];
                }
            }
        }
        for i in 0..d {
            out[i] -= self.potential.gradient_1d(x[i]);
        }
    }

    pub fn drift(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.d];
        self.drift_into(x, y, &mut out);
        out
    }

    /// `σ ξ` written into `out`.
    #[inline]
    pub fn apply_diffusion(&self, xi: &[f64], out: &mut [f64]) {
        match &self.diffusion {
            Diffusion::Scalar(s) => {
                for (o, &v) in out.iter_mut().zip(xi) {
                    *o = s * v;
                }
            }
            Diffusion::Matrix(m) => {
                let d = self.d;
                for i in 0..d {
                    out[i] = (0..d).map(|j| m[i * d + j] * xi[j]).sum();
                }
            }
        }
    }

    /// `sup ‖a_jj‖` for constant diffusions, `a = σ σᵀ`.
    pub fn a_jj_sup(&self, j: usize) -> Option<f64> {
        match &self.diffusion {
            Diffusion::Scalar(s) => Some(s * s),
            Diffusion::Matrix(m) => Some((0..self.d).map(|k| m[j * self.d + k].powi(2)).sum()),
        }
    }

    /// `(γ, σ₀)` when the model has the Gibbs product form.
    pub fn gibbs_parameters(&self) -> Option<(f64, f64)> {
        match (&self.damping, &self.diffusion) {
            (Damping::Scalar(g), Diffusion::Scalar(s)) if *g > 0.0 && *s > 0.0 && self.potential.is_confining() => {
                Some((*g, *s))
            }
            _ => None,
        }
    }

    /// Default burn-in `10/γ` for Langevin-type models.
    pub fn default_burn_in(&self) -> f64 {
        match self.damping {
            Damping::Scalar(g) if g > 0.0 => 10.0 / g,
            Damping::PositionModulated { base, .. } if base > 0.0 => 10.0 / base,
            _ => 10.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn drift_assembly() {
        let m = ModelSpec::langevin(2, 0.5, 1.0).unwrap();
        let b = m.drift(&[1.0, -2.0], &[0.4, 0.2]);
        assert_eq!(b, vec![-(0.2 + 1.0), -(0.1 - 2.0)]);
        let dw = ModelSpec::double_well(1, 1.0, 1.0, 0.5).unwrap();
        // ∇V = 4·0.5·s(s²−1) at s = 2 → 12
        assert!((dw.drift(&[2.0], &[0.0])[0] + 12.0).abs() < 1e-14);
    }

    #[test]
    fn asymmetric_elliptic_diffusion_rejected() {
        let flags = AssumptionFlags {
            c_bounded: true,
            sigma_elliptic_bounded: true,
            v_lower_bounded: true,
            erg_condition: true,
        };
        let r = ModelSpec::new(
            "bad",
            2,
            Damping::Scalar(1.0),
            Potential::Quadratic { stiffness: 1.0 },
            Diffusion::Matrix(vec![1.0, 0.2, 0.0, 1.0]),
            flags,
        );
        assert!(r.is_err());
        let ok = ModelSpec::new(
            "ok",
            2,
            Damping::Matrix(vec![1.0, 0.1, 0.0, 1.0]),
            Potential::Quadratic { stiffness: 1.0 },
            Diffusion::Matrix(vec![1.0, 0.2, 0.2, 1.0]),
            flags,
        )
        .unwrap();
        assert_eq!(ok.a_jj_sup(0), Some(1.04));
    }

    #[test]
    fn catalog_and_json() {
        let m = ModelSpec::catalog("double-well", 1).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        let back: ModelSpec = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
        assert!(ModelSpec::catalog("nope", 1).is_err());
        assert!(ModelSpec::free(1, 1.0).unwrap().gibbs_parameters().is_none());
        assert_eq!(
            ModelSpec::langevin(1, 2.0, 1.0).unwrap().gibbs_parameters(),
            Some((2.0, 1.0))
        );
    }
}
